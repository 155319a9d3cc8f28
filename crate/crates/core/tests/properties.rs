use m2xfp::dse::ebw;
use m2xfp::engine::{pe_subgroup_mac, top1_decode};
use m2xfp::numerics::{decode, encode_rne, FP6_E2M3, FP8_E4M3};
use m2xfp::oracle::{formula_table, mac_oracle, nearest_code, partial_rational, reference_argmax};
use m2xfp::packing::{pack, quantize_tensor, read_container, unpack, write_container};
use m2xfp::quantizer::group_sse;
use m2xfp::{dequantize, quantize, GroupConfig, MiniFloatSpec, QuantizeOptions, FP4_E2M1};
use proptest::prelude::*;

fn configs() -> impl Strategy<Value = GroupConfig> {
    prop::sample::select(vec![
        GroupConfig::mxfp4(),
        GroupConfig::nvfp4(),
        GroupConfig::smx4(),
        GroupConfig::elem_em(1),
        GroupConfig::elem_em(2),
        GroupConfig::sg_em(2, false),
        GroupConfig::sg_em(1, true).with_subgroup(4),
        GroupConfig::sg_ee(2, true),
        GroupConfig::m2nvfp4(m2xfp::TensorRole::Activations),
    ])
}

fn group(k: usize) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, k), -30i32..30).prop_map(|(v, e)| v.iter().map(|x| x * 2f64.powi(e)).collect())
}

fn check_encoder(spec: &MiniFloatSpec, y: f64) -> Result<(), TestCaseError> {
    let table = formula_table(spec);
    let code = encode_rne(spec, y);
    prop_assert_eq!(code.0 & ((1u8 << (spec.exp_bits + spec.man_bits)) - 1), nearest_code(&table, y.abs()));
    let v = decode(spec, code);
    if v != 0.0 {
        prop_assert_eq!(v < 0.0, y < 0.0);
    }
    Ok(())
}

proptest! {
    #[test]
    fn encoders_pick_nearest_code(y in -500.0f64..500.0) {
        check_encoder(&FP4_E2M1, y)?;
        check_encoder(&FP6_E2M3, y)?;
        check_encoder(&FP8_E4M3, y)?;
    }

    #[test]
    fn metadata_never_loses_to_mxfp4(x in group(32)) {
        let base = group_sse(&x, &dequantize(&quantize(&x, &GroupConfig::mxfp4(), None).unwrap()), 8);
        for cfg in [GroupConfig::elem_em(1), GroupConfig::elem_em(2), GroupConfig::sg_em(2, false), GroupConfig::sg_ee(1, false)] {
            let sse = group_sse(&x, &dequantize(&quantize(&x, &cfg, None).unwrap()), 8);
            prop_assert!(sse <= base, "{}: {} > {}", cfg.label(), sse, base);
        }
    }

    #[test]
    fn adaptive_never_loses_to_fixed(x in group(32)) {
        for (fixed, adaptive) in [(GroupConfig::sg_em(2, false), GroupConfig::sg_em(2, true)), (GroupConfig::sg_ee(2, false), GroupConfig::sg_ee(2, true))] {
            let f = group_sse(&x, &dequantize(&quantize(&x, &fixed, None).unwrap()), 8);
            let a = group_sse(&x, &dequantize(&quantize(&x, &adaptive, None).unwrap()), 8);
            prop_assert!(a <= f);
        }
    }

    #[test]
    fn tree_matches_argmax(codes in prop::collection::vec(0u8..16, 1..=16), meta in 0u8..4) {
        prop_assert_eq!(top1_decode(&codes, meta).index, reference_argmax(&codes));
    }

    #[test]
    fn mac_matches_rational(w in prop::collection::vec(0u8..16, 8), x in prop::collection::vec(0u8..16, 8), meta in 0u8..4, sg in 0u8..4) {
        let top = top1_decode(&x, meta);
        prop_assert_eq!(partial_rational(pe_subgroup_mac(&w, &x, top, sg)), mac_oracle(&w, &x, top, 4 + sg as i32));
    }

    #[test]
    fn tensors_round_trip(cfg in configs(), rows in 1u64..4, cols in 1u64..70, seed in any::<u64>()) {
        let n = (rows * cols) as usize;
        let values: Vec<f32> = (0..n).map(|i| ((seed.rotate_left(i as u32 % 64) >> 40) as f32 - 8e6) * 1e-6).collect();
        let packed = quantize_tensor(&values, &[rows, cols], &cfg, &QuantizeOptions::default()).unwrap();
        prop_assert_eq!(&pack(&unpack(&packed).unwrap(), &packed.dims, &cfg).unwrap(), &packed);
        let mut bytes = Vec::new();
        write_container(&packed, &mut bytes).unwrap();
        prop_assert_eq!(&read_container(&bytes[..]).unwrap(), &packed);
        // any strict prefix is rejected
        let cut = bytes.len() * (seed % 97) as usize / 97;
        prop_assert!(read_container(&bytes[..cut]).is_err());
    }
}

#[test]
fn ebw_falls_as_subgroups_grow() {
    for cfg in [GroupConfig::elem_em(1), GroupConfig::sg_em(2, false), GroupConfig::sg_ee(1, false)] {
        let e: Vec<_> = [2, 4, 8, 16, 32].iter().map(|&sg| ebw(&cfg.with_subgroup(sg))).collect();
        assert!(e.windows(2).all(|w| w[0] > w[1]), "{}: {e:?}", cfg.label());
    }
}
