use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use keeplearn::tensor::gradcheck::{analytic_gradients, compare, numeric_gradients, GradCheck};
use keeplearn::tensor::{Padding, Tape, Targets, Tensor, Var};

#[derive(Clone, Debug)]
enum Layer {
    Conv { k: usize, stride: usize, same: bool, cout: usize },
    Relu,
}

fn layer() -> impl Strategy<Value = Layer> {
    prop_oneof![
        (prop_oneof![Just(1usize), Just(3)], 1usize..=2, any::<bool>(), 1usize..=3)
            .prop_map(|(k, stride, same, cout)| Layer::Conv { k, stride, same, cout }),
        Just(Layer::Relu),
    ]
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    /// conv/relu stacks of depth ≤ 6 followed by pooling, a dense layer and
    /// cross-entropy.
    #[test]
    fn composite_networks_match_finite_differences(
        layers in proptest::collection::vec(layer(), 1..=4),
        seed in 0u64..1000,
        batch in 1usize..=2,
        cin in 1usize..=2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = vec![randn(&mut rng, vec![batch, 5, 5, cin])];
        let mut c = cin;
        for l in &layers {
            if let Layer::Conv { k, cout, .. } = l {
                inputs.push(randn(&mut rng, vec![*k, *k, c, *cout]));
                inputs.push(randn(&mut rng, vec![*cout]));
                c = *cout;
            }
        }
        inputs.push(randn(&mut rng, vec![3, c]));
        inputs.push(randn(&mut rng, vec![3]));
        let labels: Vec<usize> = (0..batch).map(|i| (seed as usize + i) % 3).collect();
        let layers2 = layers.clone();
        let f = move |t: &mut Tape<f64>, v: &[Var]| {
            let mut h = v[0];
            let mut i = 1;
            for l in &layers2 {
                h = match l {
                    Layer::Conv { k, stride, same, .. } => {
                        let pad = if *same { Padding::Same } else { Padding::Explicit(k / 2) };
                        let y = t.conv2d(h, v[i], Some(v[i + 1]), *stride, pad)?;
                        i += 2;
                        y
                    }
                    Layer::Relu => t.relu(h)?,
                };
            }
            let pooled = t.global_avgpool(h)?;
            let logits = t.dense(pooled, v[i], v[i + 1])?;
            t.softmax_cross_entropy(logits, &Targets::Index(labels.clone()), 1.0)
        };
        let cfg = GradCheck::default();
        let a = analytic_gradients(&inputs, &f).unwrap();
        let n = numeric_gradients(&inputs, &f, cfg.h).unwrap();
        let report = compare(&a, &n, &cfg);
        // a perturbation can cross a ReLU kink; such entries are rare and
        // isolated, so allow at most one per network
        prop_assert!(report.failures <= 1, "{:?}: {:?}", layers, report);
    }

    #[test]
    fn soft_target_cross_entropy_matches_finite_differences(seed in 0u64..1000, t in prop_oneof![Just(1.0f64), Just(2.0)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = randn(&mut rng, vec![3, 4]);
        let mut probs: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..1.0)).collect();
        for row in probs.chunks_mut(4) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        let f = move |tape: &mut Tape<f64>, v: &[Var]| tape.softmax_cross_entropy(v[0], &Targets::Probs(probs.clone()), t);
        let cfg = GradCheck::default();
        let report = compare(&analytic_gradients(std::slice::from_ref(&logits), &f).unwrap(), &numeric_gradients(&[logits], &f, cfg.h).unwrap(), &cfg);
        prop_assert!(report.passed(), "{:?}", report);
    }
}
