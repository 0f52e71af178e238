//! Monte-Carlo behavior of synchronization and CFO estimation under noise.

use num_complex::Complex64;

use rffi_core::channel::{add_awgn, add_awgn_with_reference};
use rffi_core::frontend::{compensate_cfo, estimate_cfo, normalize, preprocess, synchronize, FrontendConfig};
use rffi_core::lora_phy::{apply_impairments, make_preamble, DeviceProfile, IqFrame, LoraConfig};

fn with_cfo(cfo: f64) -> IqFrame {
    let cfg = LoraConfig::default();
    let dev = DeviceProfile {
        cfo_hz: cfo,
        ..DeviceProfile::ideal("x")
    };
    apply_impairments(&make_preamble(&cfg).unwrap(), &dev, 0).unwrap()
}

#[test]
fn sync_offset_under_noise() {
    let cfg = LoraConfig::default();
    let pre = make_preamble(&cfg).unwrap();
    let mut samples = vec![Complex64::new(0.0, 0.0); 777];
    samples.extend_from_slice(&pre.samples);
    samples.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), 300));
    let padded = pre.derive(samples);
    let hits = (0..200)
        .filter(|&seed| {
            let rx = add_awgn_with_reference(&padded, pre.power(), 20.0, seed).unwrap();
            let s = synchronize(&rx, &cfg).unwrap();
            s.start_index.abs_diff(777) <= 1
        })
        .count();
    assert!(hits >= 190, "{hits} of 200 within one sample");
}

#[test]
fn cfo_estimate_under_noise() {
    let cfg = LoraConfig::default();
    let tx = with_cfo(200.0);
    let errors: Vec<f64> = (0..500)
        .map(|seed| estimate_cfo(&add_awgn(&tx, 20.0, seed).unwrap(), &cfg).unwrap() - 200.0)
        .collect();
    let within = errors[..200].iter().filter(|e| e.abs() <= 5.0).count();
    assert!(within >= 190, "{within} of 200 within 5 Hz");
    let bias = errors.iter().sum::<f64>() / errors.len() as f64;
    assert!(bias.abs() < 1.0, "bias {bias} Hz");
}

#[test]
fn noiseless_cfo_estimate() {
    let cfg = LoraConfig::default();
    let est = estimate_cfo(&with_cfo(200.0), &cfg).unwrap();
    assert!((est - 200.0).abs() < 0.5, "{est}");
}

#[test]
fn compensation_is_additive_in_phase() {
    let tx = with_cfo(150.0);
    let once = compensate_cfo(&tx, 150.0);
    let twice = compensate_cfo(&compensate_cfo(&tx, 75.0), 75.0);
    for (a, b) in once.samples.iter().zip(&twice.samples) {
        assert!((a - b).norm() < 1e-9);
    }
}

#[test]
fn normalize_removes_complex_scale_up_to_phase() {
    let x = with_cfo(40.0);
    let c = Complex64::from_polar(3.7, 1.1);
    let scaled = x.derive(x.samples.iter().map(|s| s * c).collect());
    let a = normalize(&x).unwrap();
    let b = normalize(&scaled).unwrap();
    let phase = Complex64::from_polar(1.0, c.arg());
    for (u, v) in a.samples.iter().zip(&b.samples) {
        assert!((u * phase - v).norm() < 1e-12);
    }
}

#[test]
fn residual_cfo_is_recorded() {
    let cfg = LoraConfig::default();
    let (out, sync) = preprocess(&with_cfo(-120.0), &cfg, &FrontendConfig::default()).unwrap();
    assert!((sync.cfo_estimate_hz + 120.0).abs() < 0.5);
    let residual: f64 = out.meta["residual_cfo_hz"].parse().unwrap();
    assert!(residual.abs() < 1e-6);
}
