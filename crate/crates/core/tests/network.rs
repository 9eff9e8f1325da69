use ssprop_core::nn::{cross_entropy_loss, Adam, Layer};
use ssprop_core::{
    BackwardPlan, Checkpoint, LayerSpec, Mode, ModelSpec, Network, SparsifyMode, Tensor4,
};

fn spec() -> ModelSpec {
    ModelSpec::new(vec![
        LayerSpec::Conv {
            out_channels: 6,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Conv {
            out_channels: 8,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.2 },
        LayerSpec::AvgPool { size: 2 },
        LayerSpec::Linear { out_features: 3 },
    ])
}

/// Class `c` lights up quadrant `c` of an 8×8 image.
fn toy_batch(n: usize) -> (Tensor4<f64>, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let x = Tensor4::from_fn([n, 1, 8, 8], |b, _, h, w| {
        let q = (h / 4) * 2 + w / 4;
        let noise = ((b * 131 + h * 17 + w * 7) % 13) as f64 / 40.0;
        if q == labels[b] {
            1.0 + noise
        } else {
            noise
        }
    });
    (x, labels)
}

fn step(
    net: &mut Network<f64>,
    opt: &mut Adam<f64>,
    x: &Tensor4<f64>,
    y: &[usize],
    plan: &BackwardPlan,
    seed: u64,
) -> f64 {
    let logits = net.forward(x, Mode::Train { seed }).unwrap();
    let (loss, grad) = cross_entropy_loss(&logits, y).unwrap();
    net.backward(&grad, plan).unwrap();
    opt.step(&mut net.param_groups()).unwrap();
    loss
}

#[test]
fn training_reduces_loss_dense_and_sparse() {
    let (x, y) = toy_batch(12);
    for plan in [
        BackwardPlan::dense(),
        BackwardPlan {
            drop_rate: 0.5,
            mode: SparsifyMode::Channel,
            seed: 4,
        },
    ] {
        let mut net = Network::<f64>::build(&spec(), [1, 8, 8], 1).unwrap();
        let mut opt = Adam::with_lr(0.01);
        let first = step(&mut net, &mut opt, &x, &y, &plan, 0);
        let mut last = first;
        for s in 1..40 {
            last = step(&mut net, &mut opt, &x, &y, &plan, s);
        }
        assert!(last < 0.5 * first, "{plan:?}: {first} -> {last}");
        assert_eq!(net.predict(&x).unwrap(), y);
    }
}

#[test]
fn zero_drop_rate_matches_dense_bitwise() {
    let (x, y) = toy_batch(6);
    let mut a = Network::<f64>::build(&spec(), [1, 8, 8], 2).unwrap();
    let mut b = a.clone();
    let (mut oa, mut ob) = (Adam::with_lr(0.01), Adam::with_lr(0.01));
    let zero = BackwardPlan {
        drop_rate: 0.0,
        mode: SparsifyMode::Channel,
        seed: 99,
    };
    for s in 0..3 {
        assert_eq!(
            step(&mut a, &mut oa, &x, &y, &BackwardPlan::dense(), s),
            step(&mut b, &mut ob, &x, &y, &zero, s)
        );
    }
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    assert_eq!(Checkpoint::from_network(&a), Checkpoint::from_network(&b));
}

#[test]
fn sparse_backward_zeroes_dropped_channel_gradients() {
    let (x, y) = toy_batch(4);
    let mut net = Network::<f64>::build(&spec(), [1, 8, 8], 3).unwrap();
    let logits = net.forward(&x, Mode::Train { seed: 0 }).unwrap();
    let (_, grad) = cross_entropy_loss(&logits, &y).unwrap();
    let plan = BackwardPlan {
        drop_rate: 0.5,
        mode: SparsifyMode::Channel,
        seed: 0,
    };
    let (_, stats) = net.backward(&grad, &plan).unwrap();
    assert_eq!(
        stats.conv_channels,
        vec![("0.conv".to_string(), 3, 6), ("4.conv".to_string(), 4, 8)]
    );
    for layer in net.layers() {
        if let Layer::Conv(u) = layer {
            let c = u.conv.out_channels();
            let per = u.grad_weights.len() / c;
            let zero = (0..c)
                .filter(|&q| {
                    u.grad_bias[q] == 0.0
                        && u.grad_weights.data()[q * per..(q + 1) * per]
                            .iter()
                            .all(|&v| v == 0.0)
                })
                .count();
            assert_eq!(zero, c / 2);
        }
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sspn");
    let (x, y) = toy_batch(6);
    let mut net = Network::<f32>::build(&spec(), [1, 8, 8], 5).unwrap();
    let mut opt = Adam::<f32>::with_lr(0.01);
    let xf = x.cast::<f32>();
    for s in 0..3 {
        let logits = net.forward(&xf, Mode::Train { seed: s }).unwrap();
        let (_, g) = cross_entropy_loss(&logits, &y).unwrap();
        net.backward(&g, &BackwardPlan::dense()).unwrap();
        opt.step(&mut net.param_groups()).unwrap();
    }
    Checkpoint::from_network(&net).save(&path).unwrap();
    let mut fresh = Network::<f32>::build(&spec(), [1, 8, 8], 77).unwrap();
    Checkpoint::load(&path).unwrap().apply(&mut fresh).unwrap();
    assert_eq!(
        net.forward(&xf, Mode::Eval).unwrap(),
        fresh.forward(&xf, Mode::Eval).unwrap()
    );
    assert!(Checkpoint::load(dir.path().join("missing")).is_err());
}

#[test]
fn build_rejects_wrong_input() {
    let mut net = Network::<f64>::build(&spec(), [1, 8, 8], 0).unwrap();
    assert!(net
        .forward(&Tensor4::zeros([1, 1, 6, 8]), Mode::Eval)
        .is_err());
}
