//! The gradient-check harness passes on the real layers and catches a
//! deliberately wrong gradient.

use ssprop_core::gradcheck::{check_probe, run_suite, GradientProbe, LayerProbe, Suite};
use ssprop_core::{ConvGeometry, Precision, Result};

/// A convolution probe whose reported weight gradient is scaled by 1.01.
struct Skewed(LayerProbe);

impl GradientProbe for Skewed {
    fn name(&self) -> String {
        format!("skewed {}", self.0.name())
    }

    fn inputs(&self) -> Vec<Vec<f64>> {
        self.0.inputs()
    }

    fn evaluate(&self, inputs: &[Vec<f64>], precision: Precision) -> Result<(f64, Vec<Vec<f64>>)> {
        let (loss, mut grads) = self.0.evaluate(inputs, precision)?;
        for g in &mut grads[1] {
            *g *= 1.01;
        }
        Ok((loss, grads))
    }
}

fn conv_probe() -> LayerProbe {
    LayerProbe::Conv {
        geometry: ConvGeometry::new(3, 2, 1).unwrap(),
        input: [2, 2, 5, 5],
        out_channels: 3,
        seed: 4,
    }
}

#[test]
fn full_suite_passes_in_both_precisions() {
    for precision in [Precision::Double, Precision::Single] {
        let report = run_suite(0, precision).unwrap();
        assert!(report.passed(), "{report}");
        for suite in [
            Suite::FiniteDifference,
            Suite::Adjointness,
            Suite::MaskedOracle,
        ] {
            assert!(report.worst(suite).is_some());
        }
        assert!(report.worst_conv().unwrap().error <= 1e-6 || precision == Precision::Single);
    }
}

#[test]
fn suite_is_deterministic_for_a_seed() {
    let a = run_suite(5, Precision::Double).unwrap();
    let b = run_suite(5, Precision::Double).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_string(), b.to_string());
}

#[test]
fn corrupted_gradient_is_reported_by_name() {
    let good = check_probe(&conv_probe(), 1e-5, 1e-6, Precision::Double).unwrap();
    assert!(good.passed(), "{good}");
    let bad = check_probe(&Skewed(conv_probe()), 1e-5, 1e-6, Precision::Double).unwrap();
    assert!(!bad.passed());
    assert!(bad.error > 1e-3, "{bad}");
    let line = bad.to_string();
    assert!(
        line.starts_with("FAIL") && line.contains("skewed conv k3 s2 p1"),
        "{line}"
    );
}
