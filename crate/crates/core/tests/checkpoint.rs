use salu_core::checkpoint;
use salu_core::model::HeadKind;
use salu_core::{ModelConfig, Transformer};

fn net(kind: HeadKind) -> Transformer {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        seed: 5,
        ..ModelConfig::default()
    };
    Transformer::new(cfg, kind).unwrap()
}

fn bits(t: &Transformer) -> Vec<u64> {
    t.params()
        .iter()
        .flat_map(|(_, _, x)| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [HeadKind::Policy, HeadKind::Reward] {
        let a = net(kind);
        let path = dir.path().join(format!("{}.ckpt", kind.as_str()));
        checkpoint::save(&a, &path).unwrap();
        let b = checkpoint::load(&path).unwrap();
        assert_eq!(b.kind(), kind);
        assert_eq!(b.config(), a.config());
        assert_eq!(bits(&a), bits(&b));

        let again = dir.path().join("again.ckpt");
        checkpoint::save(&b, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn damaged_files_are_rejected() {
    let mut buf = Vec::new();
    checkpoint::write_to(&net(HeadKind::Policy), &mut buf).unwrap();

    assert!(checkpoint::read_from(&buf[..buf.len() - 3]).is_err());

    let mut extra = buf.clone();
    extra.push(0);
    assert!(checkpoint::read_from(extra.as_slice()).is_err());

    let mut magic = buf.clone();
    magic[0] = b'x';
    assert!(checkpoint::read_from(magic.as_slice()).is_err());

    let needle = b"format_version=1";
    let at = buf.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut version = buf.clone();
    version[at + needle.len() - 1] = b'9';
    assert!(checkpoint::read_from(version.as_slice()).is_err());
}
