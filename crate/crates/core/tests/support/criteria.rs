//! Whole-property checks, each returning a one-line summary on success.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xtopic_aes::adversary::GradientReversal;
use xtopic_aes::corpus::{denormalize_score, normalize_score, score_to_class, TopicRegistry, Trait};
use xtopic_aes::metrics::qwk;
use xtopic_aes::model::{AdvRouting, Group, Params};
use xtopic_aes::pseudo::MemoryBank;
use xtopic_aes::trainer::Selection;

use super::*;

pub type Outcome = Result<String, String>;

/// A random rating vector pair over a random range inside 0..=60.
pub fn random_qwk_case(rng: &mut ChaCha8Rng) -> (Vec<i32>, Vec<i32>, i32, i32) {
    let min = rng.random_range(0..=10);
    let max = rng.random_range(min + 1..=60);
    let len = rng.random_range(1..=50);
    let gold: Vec<i32> = (0..len).map(|_| rng.random_range(min..=max)).collect();
    let pred: Vec<i32> = match rng.random_range(0..4) {
        // near agreement
        0 => gold.iter().map(|&g| (g + rng.random_range(-2..=2)).clamp(min, max)).collect(),
        1 => gold.clone(),
        // a narrow band of ratings, often constant
        2 => {
            let c = rng.random_range(min..=max);
            (0..len).map(|_| (c + rng.random_range(0..=1)).min(max)).collect()
        }
        _ => (0..len).map(|_| rng.random_range(min..=max)).collect(),
    };
    (pred, gold, min, max)
}

pub fn qwk_matches_reference(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (pred, gold, min, max) = random_qwk_case(&mut rng);
        let got = qwk(&pred, &gold, min, max).map_err(|e| format!("case {case}: {e}"))?;
        let want = reference_qwk(&pred, &gold, min, max);
        if (got - want).abs() > 1e-10 {
            return Err(format!("case {case}: {got} vs {want} for {pred:?} {gold:?} [{min},{max}]"));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(format!("{cases} pairs, worst gap {worst:.1e}"))
}

pub const FD_PROBES: usize = 100;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn gradient_sweep(component: Component, seed: u64) -> FdReport {
    let dims = tiny_dims();
    let backend = tiny_backend(seed);
    let (sources, target) = tiny_essays(3, &dims, seed + 100);
    let params = Params::init(dims, &TINY_TOPICS, seed + 200).unwrap();
    let batch = batch_of(&sources, &target);
    let labels = [0, 2, 3];
    finite_difference_sweep(component, &params, backend.as_ref(), &batch, &labels, 7, FD_PROBES, seed, FD_REL_TOL)
}

/// Two sweeps of `component`; at least 40% of probes must see a clearly
/// nonzero gradient.
pub fn gradients_match(component: Component) -> Outcome {
    let mut worst = 0.0f64;
    for seed in [1, 2] {
        let r = gradient_sweep(component, seed);
        if r.probes != FD_PROBES {
            return Err(format!("{component:?}: ran {} probes", r.probes));
        }
        if r.informative < FD_PROBES * 2 / 5 {
            return Err(format!("{component:?} seed {seed}: only {} informative probes", r.informative));
        }
        if !r.failures.is_empty() {
            return Err(format!("{} of {FD_PROBES} probes failed: {}", r.failures.len(), r.failures.join("; ")));
        }
        worst = worst.max(r.worst_rel);
    }
    Ok(format!("{component:?} worst relative error {worst:.1e}"))
}

/// Prompt and discriminator gradients of the adversarial loss with and
/// without reversal, for one random configuration.
pub fn reversal_pair(seed: u64) -> (Params, Params) {
    let dims = tiny_dims();
    let backend = tiny_backend(seed);
    let (sources, target) = tiny_essays(2 + (seed as usize % 3), &dims, seed ^ 0x5eed);
    let params = Params::init(dims, &TINY_TOPICS, seed * 7 + 1).unwrap();
    let batch = batch_of(&sources, &target);
    let grl = GradientReversal::new(1.0).unwrap();
    let (_, reversed) = component_loss(Component::Adv, &params, backend.as_ref(), &batch, &[], 1, Some(AdvRouting::Reversed(grl)));
    let (_, plain) = component_loss(Component::Adv, &params, backend.as_ref(), &batch, &[], 1, Some(AdvRouting::Plain));
    (reversed, plain)
}

pub fn reversal_negates(configs: u64) -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..configs {
        let (reversed, plain) = reversal_pair(seed);
        let mut nonzero = false;
        for (a, b) in reversed.tensors().iter().zip(&plain.tensors()) {
            match a.group {
                Group::Shared | Group::Specific => {
                    for (x, y) in a.data.iter().zip(b.data) {
                        worst = worst.max((x + y).abs());
                        if (x + y).abs() > 1e-10 {
                            return Err(format!("seed {seed} {}: {x} vs {y}", a.name));
                        }
                        nonzero |= *y != 0.0;
                    }
                }
                Group::Discriminators if a.data != b.data => {
                    return Err(format!("seed {seed} {}: discriminator gradient changed", a.name));
                }
                Group::Discriminators => {}
                _ if a.data.iter().chain(b.data).any(|&v| v != 0.0) => {
                    return Err(format!("seed {seed} {}: adversarial loss reached a non-feature group", a.name));
                }
                _ => {}
            }
        }
        if !nonzero {
            return Err(format!("seed {seed}: adversarial gradient never reached the prompt"));
        }
    }
    Ok(format!("{configs} configurations, worst |g + g'| {worst:.1e}"))
}

/// A bank of `n` entries. Features are drawn from a small pool so exact
/// duplicates occur; soft labels are one-hot or split evenly over two
/// classes so neighbor means tie between classes.
pub fn tied_bank(n: usize, dim: usize, seed: u64) -> MemoryBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Array1<f64>> = (0..(n / 3).max(2))
        .map(|_| Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0)))
        .collect();
    let ids: Vec<String> = (0..n).map(|i| format!("e{:03}", (i * 37) % 1000)).collect();
    let feats = (0..n).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect::<Vec<_>>();
    let probs = (0..n)
        .map(|_| {
            let mut p = Array1::zeros(4);
            let a = rng.random_range(0..4);
            if rng.random_bool(0.5) {
                p[a] = 1.0;
            } else {
                let b = (a + 1 + rng.random_range(0..3)) % 4;
                p[a] = 0.5;
                p[b] = 0.5;
            }
            p
        })
        .collect::<Vec<_>>();
    // tau = 1 stores the labels unchanged
    MemoryBank::from_predictions(&ids, &feats, &probs, 0.9, 1.0).unwrap()
}

/// A bank with continuous features and soft labels.
pub fn generic_bank(n: usize, dim: usize, seed: u64) -> MemoryBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
    let feats: Vec<_> = (0..n).map(|_| Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))).collect();
    let probs: Vec<_> = (0..n)
        .map(|_| {
            let p = Array1::from_shape_fn(4, |_| rng.random_range(0.01..1.0));
            let s = p.sum();
            p / s
        })
        .collect();
    MemoryBank::from_predictions(&ids, &feats, &probs, 0.9, 2.0).unwrap()
}

pub fn pseudo_agrees(bank: &MemoryBank, query: &Array1<f64>, query_id: &str, k: usize) -> Result<(), String> {
    let got = bank.knn_pseudo_label(query.view(), query_id, k).map_err(|e| e.to_string())?;
    let (class, soft, ids) = brute_force_pseudo_label(bank, query, query_id, k);
    if got.class != class || got.neighbors != ids || got.soft.to_vec() != soft {
        return Err(format!(
            "k={k} query {query_id}: library ({}, {:?}, {:?}) oracle ({class}, {ids:?}, {soft:?})",
            got.class, got.neighbors, got.soft
        ));
    }
    Ok(())
}

/// Tied and continuous banks of up to 100 entries, queried from inside and
/// outside the bank.
pub fn pseudo_labels_match_oracle() -> Outcome {
    let mut queries = 0;
    let mut tied_classes = 0;
    for seed in 0..20 {
        let n = 12 + (seed as usize * 7) % 89;
        let bank = tied_bank(n, 5, seed);
        for (qi, entry) in bank.entries().iter().enumerate().take(25) {
            for k in [1, 3, 8] {
                pseudo_agrees(&bank, &entry.feature, &entry.essay_id, k)?;
                let (_, soft, _) = brute_force_pseudo_label(&bank, &entry.feature, &entry.essay_id, k);
                let max = soft.iter().cloned().fold(f64::MIN, f64::max);
                tied_classes += usize::from(soft.iter().filter(|&&v| v == max).count() > 1);
                queries += 1;
            }
            pseudo_agrees(&bank, &(&entry.feature * -0.5), &format!("outside{qi}"), 3)?;
            queries += 1;
        }
    }
    if tied_classes <= 50 {
        return Err(format!("fixture produced only {tied_classes} class ties"));
    }
    for seed in 0..20 {
        let bank = generic_bank(100, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for e in bank.entries().iter().take(30) {
            let query = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
            for k in [1, 3, 8] {
                pseudo_agrees(&bank, &query, &e.essay_id, k)?;
                queries += 1;
            }
        }
    }
    Ok(format!("{queries} queries agree, {tied_classes} with tied class means"))
}

/// ASAP++ topic, holistic score range and traits besides the holistic
/// score.
pub const ASAP_TABLE: [(u32, i32, i32, &[&str]); 8] = [
    (1, 2, 12, &["Content", "Organization", "WordChoice", "SentenceFluency", "Conventions"]),
    (2, 1, 6, &["Content", "Organization", "WordChoice", "SentenceFluency", "Conventions"]),
    (3, 0, 3, &["Content", "TopicAdherence", "Language", "Narrativity"]),
    (4, 0, 3, &["Content", "TopicAdherence", "Language", "Narrativity"]),
    (5, 0, 4, &["Content", "TopicAdherence", "Language", "Narrativity"]),
    (6, 0, 4, &["Content", "TopicAdherence", "Language", "Narrativity"]),
    (7, 0, 30, &["Content", "Organization", "Conventions"]),
    (8, 0, 60, &["Content", "Organization", "WordChoice", "SentenceFluency", "Conventions"]),
];

pub fn scores_round_trip() -> Outcome {
    let reg = TopicRegistry::asap_plus_plus();
    let mut scores = 0;
    for (topic, min, max, _) in ASAP_TABLE {
        let spec = reg.get(topic).map_err(|e| e.to_string())?;
        let range = spec.score_range();
        if (range.min, range.max) != (min, max) {
            return Err(format!("topic {topic}: range [{}, {}]", range.min, range.max));
        }
        let mut ranges = vec![range];
        ranges.extend(Trait::ALL.iter().filter(|&&t| spec.has_trait(t)).map(|&t| spec.range_for(t)));
        for r in ranges {
            for raw in r.min..=r.max {
                let unit = normalize_score(raw, r).map_err(|e| e.to_string())?;
                if unit != f64::from(raw - r.min) / f64::from(r.max - r.min) || denormalize_score(unit, r) != raw {
                    return Err(format!("topic {topic} raw {raw} maps to {unit}"));
                }
                scores += 1;
            }
            if normalize_score(r.min - 1, r).is_ok() || normalize_score(r.max + 1, r).is_ok() {
                return Err(format!("topic {topic}: out-of-range score accepted"));
            }
        }
    }
    Ok(format!("{scores} raw scores round-trip"))
}

/// Bins on the grid `i / 10000`, compared in integers.
pub fn binning_sweep() -> Outcome {
    for i in 0..=10_000u32 {
        let u = f64::from(i) / 10_000.0;
        let want = match i {
            0..4000 => 0,
            4000..6000 => 1,
            6000..8000 => 2,
            _ => 3,
        };
        if score_to_class(u) != want {
            return Err(format!("{u} bins to {}, expected {want}", score_to_class(u)));
        }
    }
    Ok("10001 grid points".into())
}

pub fn trait_masks_match() -> Outcome {
    let reg = TopicRegistry::asap_plus_plus();
    if reg.topic_ids() != (1..=8).collect::<Vec<_>>() {
        return Err(format!("registry topics {:?}", reg.topic_ids()));
    }
    for (topic, _, _, traits) in ASAP_TABLE {
        let mask = reg.get(topic).unwrap().trait_mask();
        for t in Trait::ALL {
            let want = t == Trait::Holistic || traits.contains(&t.name());
            if mask[t.index()] != want {
                return Err(format!("topic {topic} trait {t}: mask {}", mask[t.index()]));
            }
        }
    }
    Ok("8 topic masks".into())
}

pub fn data_pipeline() -> Outcome {
    Ok([scores_round_trip()?, binning_sweep()?, trait_masks_match()?].join(", "))
}

pub fn frozen_groups_hold(steps: u64) -> Outcome {
    let mut t = synthetic_trainer(&small_spec(40, 2), small_config(2, 8)).map_err(|e| e.to_string())?;
    let violations = freezing_violations(&mut t, steps);
    if !violations.is_empty() {
        return Err(violations.join("; "));
    }
    Ok(format!("{steps} iterations, hashes checked after every phase"))
}

/// A 25-iteration run saved after 13, with epoch boundaries on both sides.
pub fn resume_reproduces_log(dir: &std::path::Path) -> Outcome {
    let mut config = small_config(3, 8);
    config.selection = Selection::TargetGold;
    let gap = checkpoint_round_trip(&small_spec(40, 3), &config, 25, 13, &dir.join("ckpt.json")).map_err(|e| e.to_string())?;
    if gap > 1e-10 {
        return Err(format!("resumed run differs by {gap}"));
    }
    Ok(format!("largest gap {gap:.1e}"))
}
