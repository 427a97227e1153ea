//! Checkpoint files on disk.

use blrnet::checkpoint::{self, Checkpoint, Dtype, Kind};
use blrnet_core::arch::ModelSpec;
use blrnet_core::export::{export, ExportMode};
use blrnet_core::train::xavier_init;
use blrnet_core::RngStream;

fn net_checkpoint() -> Checkpoint {
    let spec = ModelSpec::parse("64C3-SM10", [32, 4, 4]).unwrap();
    let model = xavier_init(&spec, 1).unwrap();
    let net = export(&model, ExportMode::Sample, &mut RngStream::new(2)).unwrap();
    Checkpoint::from_net(&net, 2, vec![("note".into(), "size".into())])
}

#[test]
fn packed_layer_is_a_32nd_of_its_float_form() {
    let packed = net_checkpoint();
    let w = packed.blocks.iter().position(|b| b.name == "hidden.0.weight").unwrap();
    assert_eq!(packed.blocks[w].dtype, Dtype::Bits);
    let elements = 64 * 32 * 9;
    let mut float = packed.clone();
    float.blocks[w].dtype = Dtype::F32;
    let packed_len = packed.encode().unwrap().len();
    let float_len = float.encode().unwrap().len();
    assert_eq!(float_len - packed_len, elements * 4 - elements / 8);
    assert_eq!((elements * 4) / (elements / 8), 32);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.blrn");
    let c = net_checkpoint();
    checkpoint::save(&path, &c).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.kind, Kind::Net);
    assert_eq!(back, c);
    assert_eq!(back.meta("note"), Some("size"));
    assert_eq!(back.to_net().unwrap(), c.to_net().unwrap());
}

#[test]
fn truncation_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.blrn");
    let bytes = net_checkpoint().encode().unwrap();
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, blrnet::Error::Format { .. }), "cut {cut}: {err}");
    }
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(checkpoint::load(&path).is_err());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn any_model_round_trips(seed in 0u64..1000, width in 1usize..40, bias in proptest::bool::ANY) {
        let spec = ModelSpec::parse(&format!("{width}C3-MP2-{width}FC-SM3"), [2, 4, 4]).unwrap().with_bias(bias);
        let model = xavier_init(&spec, seed).unwrap();
        let c = Checkpoint::from_model(&model, seed, Vec::new());
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        proptest::prop_assert_eq!(back.to_model().unwrap(), model);
    }

    #[test]
    fn corrupted_bytes_never_panic(pos in proptest::prelude::any::<proptest::sample::Index>(), flip in 1u8..=255) {
        let mut bytes = net_checkpoint().encode().unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        proptest::prop_assert!(Checkpoint::decode(&bytes).is_err());
    }
}
