#![allow(dead_code)]

use std::path::PathBuf;

use m2xfp::{GroupConfig, TensorRole};

/// Fixed golden input, matching `golden_input()` in `fixtures/gen_golden.py`.
pub fn golden_input() -> Vec<f32> {
    (0..32)
        .map(|i| {
            let v = 3.1 * (1.7 * i as f64).sin() * 64.0 + (i % 5) as f64 * 9.0;
            (v.round_ties_even() / 64.0) as f32
        })
        .collect()
}

pub struct Golden {
    pub name: &'static str,
    pub config: GroupConfig,
    pub len: usize,
    pub tensor_scale: Option<f64>,
}

pub fn golden_cases() -> Vec<Golden> {
    let ts = Some(2f64.powi(-7));
    let g = |name, config, len, tensor_scale| Golden { name, config, len, tensor_scale };
    vec![
        g("mxfp4", GroupConfig::mxfp4(), 32, None),
        g("elem-em-top1", GroupConfig::elem_em(1), 32, None),
        g("elem-em-top2", GroupConfig::elem_em(2), 32, None),
        g("sg-em-2b", GroupConfig::sg_em(2, false), 32, None),
        g("sg-em-2b-adaptive", GroupConfig::sg_em(2, true), 32, None),
        g("sg-ee-2b", GroupConfig::sg_ee(2, false), 32, None),
        g("smx4", GroupConfig::smx4(), 16, None),
        g("nvfp4", GroupConfig::nvfp4(), 16, ts),
        g("m2-nvfp4-w", GroupConfig::m2nvfp4(TensorRole::Weights), 16, ts),
        g("m2-nvfp4-a", GroupConfig::m2nvfp4(TensorRole::Activations), 16, ts),
    ]
}

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(format!("{name}.m2x"))
}

/// Encodes one golden case and returns (ours, expected) container bytes.
pub fn golden_bytes(case: &Golden) -> (Vec<u8>, Vec<u8>) {
    let x = golden_input();
    let opts = m2xfp::QuantizeOptions { tensor_scale: case.tensor_scale, fp16_inputs: false };
    let packed = m2xfp::packing::quantize_tensor(&x[..case.len], &[case.len as u64], &case.config, &opts).unwrap();
    let mut ours = Vec::new();
    m2xfp::packing::write_container(&packed, &mut ours).unwrap();
    let expected = std::fs::read(fixture_path(case.name)).unwrap();
    (ours, expected)
}
