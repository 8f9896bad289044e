use ddim_anomaly_core::nn::{train_classifier, train_denoiser, Classifier, Denoiser, TrainConfig};
use ddim_anomaly_core::phantom::{generate_split, PhantomConfig};
use ddim_anomaly_core::sampler::standard_normal_image;
use ddim_anomaly_core::{ImageTensor, Schedule, Shape, DISEASED, HEALTHY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: Shape = Shape::new(1, 2, 3);

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn batch(rng: &mut ChaCha8Rng, n: usize) -> (Vec<ImageTensor>, Vec<usize>) {
    let xs = (0..n).map(|_| standard_normal_image(SHAPE, rng)).collect();
    let ts = (0..n).map(|_| rng.random_range(1..=1000)).collect();
    (xs, ts)
}

/// Central differences of `loss` with respect to every parameter.
fn param_fd(params: &mut [f64], h: f64, loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + h;
            let up = loss(params);
            params[i] = orig - h;
            let down = loss(params);
            params[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn denoiser_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Denoiser::init(SHAPE.len(), &[7, 5], 4, &mut rng).unwrap();
    let (xs, ts) = batch(&mut rng, 3);
    let eps: Vec<_> = (0..3).map(|_| standard_normal_image(SHAPE, &mut rng)).collect();
    let (_, grads) = model.batch_loss_grad(&xs, &ts, &eps).unwrap();
    let mut params = model.conditioned().net().params().to_vec();
    let fd = param_fd(&mut params, 1e-6, |p| {
        let mut m = model.clone();
        m.conditioned_mut().net_mut().params_mut().copy_from_slice(p);
        m.batch_loss_grad(&xs, &ts, &eps).unwrap().0
    });
    assert!(rel_err(&grads, &fd) < 1e-4, "{}", rel_err(&grads, &fd));
}

#[test]
fn classifier_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Classifier::init(SHAPE.len(), &[6], 4, &mut rng).unwrap();
    let (xs, ts) = batch(&mut rng, 4);
    let labels = [HEALTHY, DISEASED, DISEASED, HEALTHY];
    let (_, grads) = model.batch_loss_grad(&xs, &ts, &labels).unwrap();
    let mut params = model.conditioned().net().params().to_vec();
    let fd = param_fd(&mut params, 1e-6, |p| {
        let mut m = model.clone();
        m.conditioned_mut().net_mut().params_mut().copy_from_slice(p);
        m.batch_loss_grad(&xs, &ts, &labels).unwrap().0
    });
    assert!(rel_err(&grads, &fd) < 1e-4, "{}", rel_err(&grads, &fd));
}

#[test]
fn classifier_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..10 {
        let model = Classifier::init(SHAPE.len(), &[8, 8], 6, &mut rng).unwrap();
        let x = standard_normal_image(SHAPE, &mut rng);
        let t = rng.random_range(1..=1000);
        for class in [HEALTHY, DISEASED] {
            let got = model.input_grad(&x, t, class).unwrap();
            let fd: Vec<f64> = (0..x.len())
                .map(|i| {
                    let (mut up, mut down) = (x.clone(), x.clone());
                    up.data_mut()[i] += 1e-6;
                    down.data_mut()[i] -= 1e-6;
                    (model.log_probs(&up, t).unwrap()[class] - model.log_probs(&down, t).unwrap()[class]) / 2e-6
                })
                .collect();
            assert!(rel_err(got.data(), &fd) < 1e-4, "case {case}");
        }
    }
}

#[test]
fn log_probs_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Classifier::init(SHAPE.len(), &[5], 4, &mut rng).unwrap();
    let lp = model.log_probs(&standard_normal_image(SHAPE, &mut rng), 17).unwrap();
    assert!((lp[0].exp() + lp[1].exp() - 1.0).abs() < 1e-12);
}

fn toy() -> PhantomConfig {
    PhantomConfig {
        height: 12,
        width: 12,
        lesion_radius: (1.0, 1.8),
        ..PhantomConfig::default()
    }
}

#[test]
fn denoiser_training_reduces_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = toy();
    let images: Vec<_> = generate_split(&cfg, 100, 0, &mut rng).unwrap().into_iter().map(|s| s.image).collect();
    let schedule = Schedule::default_linear();
    let init = || Denoiser::init(cfg.shape().len(), &[128], 16, &mut ChaCha8Rng::seed_from_u64(50)).unwrap();
    let train = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        iterations: 6000,
        seed: 6,
    };
    let report = train_denoiser(init(), &images, &schedule, &train).unwrap();
    let mean = |l: &[f64]| l.iter().sum::<f64>() / l.len() as f64;
    let (first, last) = (mean(&report.losses[..100]), mean(&report.losses[5900..]));
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    // Same seed, same weights.
    let again = train_denoiser(init(), &images, &schedule, &train).unwrap();
    assert_eq!(again.losses, report.losses);
}

#[test]
fn classifier_learns_the_toy_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = toy();
    let samples = generate_split(&cfg, 300, 300, &mut rng).unwrap();
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
    let schedule = Schedule::default_linear();
    let model = Classifier::init(cfg.shape().len(), &[64], 16, &mut rng).unwrap();
    let train = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 32,
        iterations: 10000,
        seed: 8,
    };
    let model = train_classifier(model, &images, &labels, &schedule, &train).unwrap().model;
    let test = generate_split(&cfg, 50, 50, &mut rng).unwrap();
    let correct = test
        .iter()
        .filter(|s| {
            let lp = model.log_probs(&s.image, 1).unwrap();
            (lp[DISEASED] > lp[HEALTHY]) == (s.label == DISEASED)
        })
        .count();
    assert!(correct >= 90, "{correct}/100 correct on clean images");
}
