//! Fork-merge identities on a small convolutional network with real targets.

use forkfield::engine::trainer::ExampleOutcome;
use forkfield::engine::*;
use forkfield::losses::TaskWeights;
use forkfield::synth::{self, GenConfig};
use forkfield::TaskRegistry;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Toy {
    net: Network,
    registry: TaskRegistry,
    example: Example,
    weights: TaskWeights,
}

fn toy(registry: TaskRegistry, attributes: usize, seed: u64, missing: f64) -> Toy {
    let gen = GenConfig {
        seed,
        image_size: [40, 32],
        instances: [1, 2],
        box_width: [12.0, 16.0],
        box_height: [14.0, 18.0],
        min_separation: 0.0,
        attributes,
        missing_probability: missing,
        placement: synth::Placement::Hard,
        ..Default::default()
    };
    let cfg = NetworkConfig {
        backbone: vec![
            LayerSpec {
                channels: 4,
                stride: 2,
                kernel: 3,
            },
            LayerSpec {
                channels: 5,
                stride: 2,
                kernel: 3,
            },
        ],
        activation: ActivationKind::Tanh,
        head_init: HeadInit::Random,
    };
    let net = Network::new(cfg, gen.input_channels().unwrap(), &registry, seed).unwrap();
    let scene = synth::generate_indexed(&gen, 0).unwrap();
    let example = Example::from_scene(&scene, &net, &registry).unwrap();
    let loss = LossConfig {
        uncertainty: false,
        ..Default::default()
    };
    let mut weights = loss.weights(&registry).unwrap();
    // Distinct weights make lambda placement observable.
    for (t, l) in weights.lambda.iter_mut().enumerate() {
        *l *= 1.0 + 0.1 * t as f64;
    }
    Toy {
        net,
        registry,
        example,
        weights,
    }
}

impl Toy {
    fn run(&self, strategy: MergeStrategy, rng: Option<&mut ChaCha8Rng>) -> ExampleOutcome {
        example_gradients(
            &self.net,
            &self.registry,
            &self.example,
            &self.weights,
            &strategy,
            2.0,
            rng,
        )
        .unwrap()
    }

    fn backbone(&self, o: &ExampleOutcome) -> Vec<f64> {
        (0..o.backward.grads.blocks.len())
            .filter(|&b| self.net.is_backbone_block(b))
            .flat_map(|b| o.backward.grads.blocks[b].data.clone())
            .collect()
    }

    fn heads(&self, o: &ExampleOutcome) -> Vec<Vec<f64>> {
        (0..o.backward.grads.blocks.len())
            .filter(|&b| !self.net.is_backbone_block(b))
            .map(|b| o.backward.grads.blocks[b].data.clone())
            .collect()
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fork_scaling_identities(seed in 0u64..10_000, a in prop::sample::select(vec![1usize, 3, 13])) {
        let toy = toy(TaskRegistry::canonical(a).unwrap(), a, seed, 0.3);
        let acc = toy.run(MergeStrategy::Accumulation, None);
        let n = acc.backward.effective_tasks as f64;
        prop_assume!(n > 0.0);
        let g_acc = toy.backbone(&acc);
        for (strategy, factor) in [
            (MergeStrategy::ForkAverage, 1.0 / n),
            (MergeStrategy::fork_power(), 1.0 / n.sqrt()),
            (MergeStrategy::ForkPower { beta: 0.3 }, n.powf(-0.3)),
        ] {
            let o = toy.run(strategy, None);
            let expected: Vec<f64> = g_acc.iter().map(|g| g * factor).collect();
            prop_assert!(rel_err(&toy.backbone(&o), &expected) <= 1e-12, "{strategy}");
            prop_assert_eq!(toy.heads(&o), toy.heads(&acc));
            prop_assert_eq!(o.total.value, acc.total.value);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for strategy in [MergeStrategy::ForkSample, MergeStrategy::ForkRandom] {
            let o = toy.run(strategy, Some(&mut rng));
            prop_assert_eq!(toy.heads(&o), toy.heads(&acc));
            prop_assert_eq!(o.total.value, acc.total.value);
        }
    }

    #[test]
    fn mean_loss_scales_both_sides(seed in 0u64..10_000) {
        let toy = toy(TaskRegistry::canonical(3).unwrap(), 3, seed, 0.3);
        let acc = toy.run(MergeStrategy::Accumulation, None);
        let mean = toy.run(MergeStrategy::MeanLoss, None);
        let n = acc.backward.effective_tasks as f64;
        prop_assert!((mean.total.value - acc.total.value / n).abs() <= 1e-12 * acc.total.value.abs());
        let expected: Vec<f64> = toy.backbone(&acc).iter().map(|g| g / n).collect();
        prop_assert!(rel_err(&toy.backbone(&mean), &expected) <= 1e-12);
        // Over all heads at once: a head whose signs cancel has a round-off-only
        // gradient with no meaningful relative error of its own.
        let h_mean: Vec<f64> = toy.heads(&mean).concat();
        let scaled: Vec<f64> = toy.heads(&acc).concat().iter().map(|g| g / n).collect();
        prop_assert!(rel_err(&h_mean, &scaled) <= 1e-12);
    }

    #[test]
    fn fork_bound_holds(seed in 0u64..10_000, a in prop::sample::select(vec![1usize, 3, 13, 32])) {
        let toy = toy(TaskRegistry::canonical(a).unwrap(), a, seed, 0.2);
        for strategy in [MergeStrategy::Accumulation, MergeStrategy::fork_power()] {
            let f = toy.run(strategy, None).backward.fork;
            prop_assert!(f.bound_holds());
            prop_assert!(f.accumulated_norm <= f.sum_of_norms() * (1.0 + 1e-12));
            prop_assert!(f.sum_of_norms() <= f.task_norms.len() as f64 * f.max_norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn pcgrad_leaves_no_conflict(
        grads in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 2..6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (merged, events) = pcgrad_merge(&grads, &mut rng);
        prop_assert_eq!(merged.len(), 5);
        for e in &events {
            prop_assert!(e.dot_after >= -1e-9, "{e:?}");
        }
    }
}

#[test]
fn single_task_makes_every_strategy_identical() {
    let toy = toy(TaskRegistry::confidence_only(), 1, 4, 0.0);
    let reference = toy.run(MergeStrategy::Accumulation, None);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for strategy in MergeStrategy::all() {
        let o = toy.run(strategy, Some(&mut rng));
        assert_eq!(o.backward.grads, reference.backward.grads, "{strategy}");
        assert_eq!(o.total.value, reference.total.value, "{strategy}");
    }
}

/// Mean and standard error of `u . g` over samples of the backbone gradient.
fn projected_mean(toy: &Toy, strategy: MergeStrategy, u: &[f64], n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let g = toy.backbone(&toy.run(strategy, Some(&mut rng)));
            g.iter().zip(u).map(|(a, b)| a * b).sum()
        })
        .collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[test]
fn random_forks_average_to_fork_average() {
    let toy = toy(TaskRegistry::canonical(3).unwrap(), 3, 21, 0.0);
    let target = toy.backbone(&toy.run(MergeStrategy::ForkAverage, None));
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let u: Vec<f64> = (0..target.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let expected: f64 = target.iter().zip(&u).map(|(a, b)| a * b).sum();
    for strategy in [MergeStrategy::ForkRandom, MergeStrategy::ForkSample] {
        let (mean, se) = projected_mean(&toy, strategy, &u, 10_000, 7);
        assert!(se > 0.0);
        assert!(
            (mean - expected).abs() <= 3.0 * se,
            "{strategy}: {mean} vs {expected} (se {se})"
        );
    }
}
