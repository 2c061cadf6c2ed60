use hypercae::error::ModelFileError;
use hypercae::network::{build_network, model_from_bytes, model_to_bytes, NetworkConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_preserves_every_bit(seed in any::<u64>(), classes in 2usize..6) {
        let mut cfg = NetworkConfig::reduced();
        cfg.classes = classes;
        let m = build_network(&cfg, None, seed).unwrap();
        let bytes = model_to_bytes(&m);
        let back = model_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(model_to_bytes(&back), bytes);
    }

    #[test]
    fn any_flipped_byte_is_rejected(seed in 0u64..8, pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let m = build_network(&NetworkConfig::reduced(), None, seed).unwrap();
        let mut bytes = model_to_bytes(&m);
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(model_from_bytes(&bytes).is_err());
    }

    #[test]
    fn any_truncation_is_rejected(seed in 0u64..4, cut in any::<prop::sample::Index>()) {
        let m = build_network(&NetworkConfig::reduced(), None, seed).unwrap();
        let bytes = model_to_bytes(&m);
        let n = cut.index(bytes.len());
        prop_assert!(model_from_bytes(&bytes[..n]).is_err());
    }
}

#[test]
fn payload_corruption_reports_checksum() {
    let m = build_network(&NetworkConfig::reduced(), None, 1).unwrap();
    let mut bytes = model_to_bytes(&m);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    assert!(matches!(model_from_bytes(&bytes), Err(ModelFileError::Checksum { .. })));
}
