mod common;

use otag::align_toy::{objective_and_grad, RepresentationBatch, ToyDims, ToyModel};
use otag::losses::{
    batch_loss, bce, obce, spa_loss, total_loss, ClassWeights, LossConfig, GRAD_AUDIO, GRAD_PRED, GRAD_TEXT,
};
use otag::Matrix;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use common::{affine_len, flatten, max_rel_err, norms_ok, numeric_grad, rng, unflatten};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;
const FLOOR: f64 = 1e-4;

fn cfg(alpha: f64) -> LossConfig {
    LossConfig {
        alpha,
        ..LossConfig::default()
    }
}

fn probs(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(0.05..0.95)).collect()
}

fn labels(r: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut t: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
    let i = r.random_range(0..n);
    t[i] = true;
    t
}

fn gauss(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.5..1.5)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bce_and_obce_gradients(seed in any::<u64>()) {
        let mut r = rng(seed);
        let k = r.random_range(1..=8);
        let p = probs(&mut r, k);
        let t = labels(&mut r, k);
        let w = ClassWeights((0..k).map(|_| r.random_range(0.05..1.0)).collect());
        let c = cfg(0.5);
        let b = bce(&p, &t, &c).unwrap();
        let fd = numeric_grad(&p, STEP, |x| bce(x, &t, &c).unwrap().value);
        prop_assert!(max_rel_err(b.grad(GRAD_PRED).unwrap(), &fd, FLOOR) < TOL);
        let o = obce(&p, &t, &w, &c).unwrap();
        let fd = numeric_grad(&p, STEP, |x| obce(x, &t, &w, &c).unwrap().value);
        prop_assert!(max_rel_err(o.grad(GRAD_PRED).unwrap(), &fd, FLOOR) < TOL);
    }

    #[test]
    fn spa_gradients(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.random_range(1..=6);
        let n = r.random_range(1..=4);
        let a = gauss(&mut r, d);
        let t = gauss(&mut r, n * d);
        prop_assume!(norms_ok(&a, &t, d));
        let c = cfg(0.5);
        let text = Matrix::from_vec(n, d, t.clone()).unwrap();
        let s = spa_loss(&a, &text, &c).unwrap();
        let fd_a = numeric_grad(&a, STEP, |x| spa_loss(x, &text, &c).unwrap().value);
        prop_assert!(max_rel_err(s.grad(GRAD_AUDIO).unwrap(), &fd_a, FLOOR) < TOL);
        let fd_t = numeric_grad(&t, STEP, |x| {
            spa_loss(&a, &Matrix::from_vec(n, d, x.to_vec()).unwrap(), &c).unwrap().value
        });
        prop_assert!(max_rel_err(s.grad(GRAD_TEXT).unwrap(), &fd_t, FLOOR) < TOL);
    }

    #[test]
    fn total_loss_gradients(seed in any::<u64>()) {
        let mut r = rng(seed);
        let k = r.random_range(1..=6);
        let d = r.random_range(1..=6);
        let p = probs(&mut r, k);
        let y = labels(&mut r, k);
        let w = ClassWeights((0..k).map(|_| r.random_range(0.05..1.0)).collect());
        let n = y.iter().filter(|&&v| v).count();
        let a = gauss(&mut r, d);
        let t = gauss(&mut r, n * d);
        prop_assume!(norms_ok(&a, &t, d));
        let c = cfg(r.random_range(0.0..2.0));
        let text = Matrix::from_vec(n, d, t.clone()).unwrap();
        let tot = total_loss(&p, &y, &w, &a, &text, &c).unwrap();

        let fd_p = numeric_grad(&p, STEP, |x| total_loss(x, &y, &w, &a, &text, &c).unwrap().value);
        prop_assert!(max_rel_err(tot.grad(GRAD_PRED).unwrap(), &fd_p, FLOOR) < TOL);
        let fd_a = numeric_grad(&a, STEP, |x| total_loss(&p, &y, &w, x, &text, &c).unwrap().value);
        prop_assert!(max_rel_err(tot.grad(GRAD_AUDIO).unwrap(), &fd_a, FLOOR) < TOL);
        let fd_t = numeric_grad(&t, STEP, |x| {
            total_loss(&p, &y, &w, &a, &Matrix::from_vec(n, d, x.to_vec()).unwrap(), &c).unwrap().value
        });
        prop_assert!(max_rel_err(tot.grad(GRAD_TEXT).unwrap(), &fd_t, FLOOR) < TOL);

        // Same linear combination as the components, elementwise.
        let b = bce(&p, &y, &c).unwrap();
        let o = obce(&p, &y, &w, &c).unwrap();
        let s = spa_loss(&a, &text, &c).unwrap();
        prop_assert!((tot.value - ((b.value + o.value) / 2.0 + c.alpha * s.value)).abs() < 1e-12);
        for ((g, bg), og) in tot.grad(GRAD_PRED).unwrap().iter().zip(b.grad(GRAD_PRED).unwrap()).zip(o.grad(GRAD_PRED).unwrap()) {
            prop_assert!((g - (bg + og) / 2.0).abs() < 1e-12);
        }
        for (g, sg) in tot.grad(GRAD_AUDIO).unwrap().iter().zip(s.grad(GRAD_AUDIO).unwrap()) {
            prop_assert!((g - c.alpha * sg).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_loss_gradients(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (m, k, d) = (r.random_range(1..=5), r.random_range(1..=5), r.random_range(1..=5));
        let p = probs(&mut r, m * k);
        let y: Vec<bool> = (0..m).flat_map(|_| labels(&mut r, k)).collect();
        let w = Matrix::from_vec(m, k, (0..m * k).map(|_| r.random_range(0.05..1.0)).collect()).unwrap();
        let a = gauss(&mut r, m * d);
        let t = gauss(&mut r, k * d);
        prop_assume!(norms_ok(&a, &t, d));
        let c = cfg(0.7);
        let eval = |p: &[f64], a: &[f64], t: &[f64]| {
            batch_loss(
                &Matrix::from_vec(m, k, p.to_vec()).unwrap(),
                &y,
                &w,
                &Matrix::from_vec(m, d, a.to_vec()).unwrap(),
                Some(&Matrix::from_vec(k, d, t.to_vec()).unwrap()),
                &c,
            )
            .unwrap()
        };
        let l = eval(&p, &a, &t);
        let fd = numeric_grad(&p, STEP, |x| eval(x, &a, &t).total);
        prop_assert!(max_rel_err(l.grad_pred.as_slice(), &fd, FLOOR) < TOL);
        let fd = numeric_grad(&a, STEP, |x| eval(&p, x, &t).total);
        prop_assert!(max_rel_err(l.grad_audio.as_ref().unwrap().as_slice(), &fd, FLOOR) < TOL);
        let fd = numeric_grad(&t, STEP, |x| eval(&p, &a, x).total);
        prop_assert!(max_rel_err(l.grad_text.as_ref().unwrap().as_slice(), &fd, FLOOR) < TOL);
    }

    #[test]
    fn composite_gradients_through_all_projections(seed in any::<u64>(), use_text in any::<bool>()) {
        let mut r = rng(seed);
        let dims = ToyDims {
            audio: r.random_range(1..=6),
            text: r.random_range(1..=6),
            joint: r.random_range(1..=6),
            classes: r.random_range(1..=6),
        };
        let m = r.random_range(1..=5);
        let model = ToyModel::new(dims, r.random()).unwrap();
        let audio = Matrix::from_vec(m, dims.audio, gauss(&mut r, m * dims.audio)).unwrap();
        let text = Matrix::from_vec(dims.classes, dims.text, gauss(&mut r, dims.classes * dims.text)).unwrap();
        let targets: Vec<bool> = (0..m).flat_map(|_| labels(&mut r, dims.classes)).collect();
        let weights = Matrix::from_vec(m, dims.classes, (0..m * dims.classes).map(|_| r.random_range(0.05..1.0)).collect()).unwrap();
        let batch = RepresentationBatch { audio, text, targets };
        let c = cfg(0.6);

        let theta = flatten(&model);
        let loss_at = |x: &[f64]| {
            objective_and_grad(&unflatten(&model, x), &batch, &weights, &c, use_text).unwrap().0.total
        };
        // Embeddings near the origin make cosine ill-conditioned; skip those.
        let emb = model.audio_proj.apply(&batch.audio).unwrap();
        let temb = model.text_proj.apply(&batch.text).unwrap();
        prop_assume!(!use_text || norms_ok(emb.as_slice(), temb.as_slice(), dims.joint));

        let (_, grad) = objective_and_grad(&model, &batch, &weights, &c, use_text).unwrap();
        let mut analytic = Vec::new();
        analytic.extend_from_slice(grad.audio_proj.weights.as_slice());
        analytic.extend_from_slice(&grad.audio_proj.bias);
        match &grad.text_proj {
            Some(g) => {
                analytic.extend_from_slice(g.weights.as_slice());
                analytic.extend_from_slice(&g.bias);
            }
            None => analytic.extend(std::iter::repeat_n(0.0, affine_len(&model.text_proj))),
        }
        analytic.extend_from_slice(grad.classifier.weights.as_slice());
        analytic.extend_from_slice(&grad.classifier.bias);
        let fd = numeric_grad(&theta, STEP, loss_at);
        prop_assert!(max_rel_err(&analytic, &fd, FLOOR) < TOL, "err {}", max_rel_err(&analytic, &fd, FLOOR));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn spa_range_and_scale_invariance(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let d = r.random_range(1..=8);
        let n = r.random_range(1..=5);
        let a = gauss(&mut r, d);
        let t = gauss(&mut r, n * d);
        prop_assume!(norms_ok(&a, &t, d));
        let c = cfg(0.5);
        let text = Matrix::from_vec(n, d, t.clone()).unwrap();
        let base = spa_loss(&a, &text, &c).unwrap().value;
        prop_assert!((0.0..=2.0).contains(&base));
        let scaled_a: Vec<f64> = a.iter().map(|v| v * scale).collect();
        prop_assert!((spa_loss(&scaled_a, &text, &c).unwrap().value - base).abs() < 1e-10);
        let row = r.random_range(0..n);
        let mut t2 = text.clone();
        t2.row_mut(row).iter_mut().for_each(|v| *v *= scale);
        prop_assert!((spa_loss(&a, &t2, &c).unwrap().value - base).abs() < 1e-10);
    }
}
