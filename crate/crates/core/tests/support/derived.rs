//! Worked examples with hand-computed or independently computed answers.
//! Each check returns `Err(reason)` instead of panicking so a runner can
//! report every failure at once.

use ndarray::{array, s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xtopic_aes::adversary::{disc_term, Discriminator, DiscriminatorSet, GradientReversal};
use xtopic_aes::classification::{cross_entropy, GradeClassifier};
use xtopic_aes::corpus::{
    denormalize_score, normalize_score, read_dataset, score_to_class, tokenize, ScoreRange, TopicRegistry, Trait,
    NUM_GRADES, NUM_TRAITS,
};
use xtopic_aes::encoder::{
    backward_prompts, encode, init_prompt_bank, project_and_concat, EncoderBackend, PromptBank, ToyActivation, ToyBackend,
};
use xtopic_aes::feats::{extract_features, Standardizer, FEATURE_DIM};
use xtopic_aes::heads::{masked_mse, trait_attention, TraitHeads};
use xtopic_aes::metrics::{dump_embeddings, qwk, Report, TopicReport};
use xtopic_aes::model::{batch_objective, forward_batch, forward_essay, AdvRouting, Batch, Group, LossWeights, Params};
use xtopic_aes::nn::{sigmoid, Linear};
use xtopic_aes::pseudo::{sharpen, target_ce_loss, MemoryBank};
use xtopic_aes::trainer::{init_bank, total_loss, Phase, TrainConfig, Trainer};

use super::*;

pub type Check = fn() -> Result<(), String>;

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want} (tol {tol:e})"))
    }
}

fn ensure(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn err<E: std::fmt::Debug>(e: E) -> String {
    format!("{e:?}")
}

fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn tsv_header() -> String {
    let mut cols = vec!["essay_id".to_string(), "topic_id".into(), "text".into()];
    cols.extend(Trait::ALL.iter().map(|t| t.name().to_string()));
    cols.join("\t")
}

fn ingest_holistic_unit() -> Result<(), String> {
    let reg = TopicRegistry::asap_plus_plus();
    let mut row = vec!["a".to_string(), "1".into(), "Dear editor .".into(), "8".into()];
    row.extend(std::iter::repeat_n(String::new(), NUM_TRAITS - 1));
    let text = format!("{}\n{}\n", tsv_header(), row.join("\t"));
    let recs = read_dataset(text.as_bytes(), &reg).map_err(err)?;
    close("unit holistic", recs[0].unit_scores[0].ok_or("missing holistic")?, (8.0 - 2.0) / (12.0 - 2.0), 1e-15)
}

fn normalize_example() -> Result<(), String> {
    close("normalize 7 in [2,12]", normalize_score(7, ScoreRange::new(2, 12)).map_err(err)?, 0.5, 0.0)
}

fn denormalize_examples() -> Result<(), String> {
    ensure(denormalize_score(0.5, ScoreRange::new(2, 12)) == 7, "0.5 in [2,12] should give 7")?;
    // 0.649 * 3 = 1.947
    ensure(denormalize_score(0.649, ScoreRange::new(0, 3)) == 2, "0.649 in [0,3] should give 2")
}

fn binning_boundary() -> Result<(), String> {
    ensure(score_to_class(0.8) == 3, "0.8 should fall in the top bin")
}

fn target_has_no_grade() -> Result<(), String> {
    let spec = small_spec(12, 3);
    let (split, _, _) = synthetic_split(&spec);
    ensure(
        split.target.essays.iter().all(|e| e.grade_class.is_none() && e.unit_scores.iter().all(Option::is_none)),
        "target essays carry labels",
    )
}

fn golden_features() -> Result<(), String> {
    let v = extract_features(&tokenize("The brave students wrote wonderful essays , but the test was hard .")).values;
    let frozen: [f64; FEATURE_DIM] = include!("../../assets/golden_features.in");
    for (i, (a, b)) in v.iter().zip(frozen.iter()).enumerate() {
        if (a - b).abs() > 1e-12 * b.abs().max(1.0) {
            return Err(format!("feature {i}: {a} vs frozen {b}"));
        }
    }
    Ok(())
}

fn standardizer_shift() -> Result<(), String> {
    let base = vec![vec![1.0, 5.0], vec![3.0, -1.0], vec![2.0, 0.5]];
    let shifted: Vec<Vec<f64>> = base.iter().map(|v| vec![v[0] + 10.0, v[1] - 3.0]).collect();
    let a = Standardizer::fit(&base).map_err(err)?;
    let b = Standardizer::fit(&shifted).map_err(err)?;
    close("mean shift 0", b.mean[0] - a.mean[0], 10.0, 1e-12)?;
    close("mean shift 1", b.mean[1] - a.mean[1], -3.0, 1e-12)?;
    close("std 0", b.std[0], a.std[0], 1e-12)?;
    close("std 1", b.std[1], a.std[1], 1e-12)
}

fn standardized_mean_zero() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vecs: Vec<Vec<f64>> = (0..20).map(|_| (0..6).map(|_| rng.random_range(-50.0..50.0)).collect()).collect();
    let s = Standardizer::fit(&vecs).map_err(err)?;
    let out: Vec<Vec<f64>> = vecs.iter().map(|v| s.transform(v)).collect();
    for k in 0..6 {
        let m = out.iter().map(|v| v[k]).sum::<f64>() / out.len() as f64;
        close(&format!("dim {k} mean"), m, 0.0, 1e-6)?;
    }
    Ok(())
}

fn sequence_length() -> Result<(), String> {
    let backend = ToyBackend::new(4, 1).map_err(err)?;
    let bank = init_prompt_bank(8, 8, &[1, 2], 4, 0).map_err(err)?;
    let tokens: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    let enc = encode(&tokens, 2, &bank, &backend).map_err(err)?;
    ensure(enc.sequence_len() == 68, format!("sequence length {}", enc.sequence_len()))
}

/// Width-4 backend whose table has a single row, so every token embeds to
/// `(1, 0, 2, -1)`.
fn hand_backend() -> ToyBackend {
    ToyBackend::from_parts(
        array![[1.0, 0.0, 2.0, -1.0]],
        array![1.0, 1.0, 1.0, 1.0],
        array![0.0, 0.0, 0.0, 2.0],
        array![[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, -1.0]],
        array![0.5, 0.0, 0.0, 1.0],
        ToyActivation::Identity,
        64,
    )
    .unwrap()
}

fn golden_h_cls() -> Result<(), String> {
    let backend = hand_backend();
    let bank = PromptBank {
        shared: array![[2.0, 0.0, 0.0, 0.0]],
        specific: vec![array![[0.0, 4.0, 0.0, 0.0]]],
        topic_ids: vec![7],
    };
    let enc = encode(&toks(&["a", "b"]), 7, &bank, &backend).map_err(err)?;
    // six rows summing to (5, 5, 5, 1)
    let m = [5.0 / 6.0, 5.0 / 6.0, 5.0 / 6.0, 1.0 / 6.0];
    let want = [m[0] + 0.5, 2.0 * m[1], m[0] + m[1], 1.0 - m[3]];
    for k in 0..4 {
        close(&format!("h_cls[{k}]"), enc.h_cls[k], want[k], 1e-14)?;
    }
    Ok(())
}

fn identity_projection() -> Result<(), String> {
    let mut proj = Linear::zeros(100, 100);
    for i in 0..100 {
        proj.weight[[i, i]] = 1.0;
    }
    let h_cls = Array1::from_shape_fn(100, |i| (i as f64).sin());
    let feats = Array1::from_elem(FEATURE_DIM, -2.0);
    let h = project_and_concat(h_cls.view(), feats.view(), &proj).map_err(err)?;
    ensure(h.len() == 186, "h should be 186 wide")?;
    ensure(h.slice(s![..100]) == h_cls, "projection prefix differs from h_cls")
}

fn prompt_gradient_nonzero() -> Result<(), String> {
    let backend = ToyBackend::new(4, 11).map_err(err)?;
    let bank = init_prompt_bank(2, 2, &[1, 2], 4, 5).map_err(err)?;
    let tokens = toks(&["some", "essay", "text"]);
    let w = array![0.3, -1.2, 0.7, 2.0];
    let f = |b: &PromptBank| encode(&tokens, 1, b, &backend).unwrap().h_cls.dot(&w);
    let enc = encode(&tokens, 1, &bank, &backend).map_err(err)?;
    let mut grads = bank.zeros_like();
    backward_prompts(&enc, w.view(), &backend, &mut grads);
    let eps = 1e-6;
    for (r, c) in [(0, 0), (1, 3)] {
        let mut plus = bank.clone();
        plus.shared[[r, c]] += eps;
        let mut minus = bank.clone();
        minus.shared[[r, c]] -= eps;
        let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
        ensure(fd.abs() > 1e-6, format!("finite difference at shared[{r},{c}] is zero"))?;
        close(&format!("shared[{r},{c}]"), grads.shared[[r, c]], fd, 1e-8)?;
    }
    Ok(())
}

fn permutation_through_mean() -> Result<(), String> {
    let backend = ToyBackend::new(6, 2).map_err(err)?;
    let bank = init_prompt_bank(2, 2, &[1], 6, 0).map_err(err)?;
    let a = encode(&toks(&["alpha", "beta", "gamma"]), 1, &bank, &backend).map_err(err)?;
    let b = encode(&toks(&["gamma", "alpha", "beta"]), 1, &bank, &backend).map_err(err)?;
    for k in 0..6 {
        close(&format!("permuted h_cls[{k}]"), a.h_cls[k], b.h_cls[k], 1e-12)?;
    }
    // a closed-form mean-pool reproduces the output
    let mean = a.inputs.sum_axis(ndarray::Axis(0)) / a.sequence_len() as f64;
    let mut probe = Array2::zeros((1, 6));
    probe.row_mut(0).assign(&mean);
    let pooled = backend.forward_cls(probe.view());
    for k in 0..6 {
        close(&format!("pooled h_cls[{k}]"), a.h_cls[k], pooled[k], 1e-12)?;
    }
    Ok(())
}

fn trait_transform_by_hand() -> Result<(), String> {
    let mut heads = TraitHeads::zeros(3, 2);
    heads.transforms[0].weight = array![[1.0, 2.0, 0.0], [0.0, -1.0, 1.0], [3.0, 0.0, -2.0]];
    heads.transforms[0].bias = array![0.5, 0.0, -1.0];
    let h = array![1.0, -1.0, 2.0];
    let got = heads.trait_transform(h.view(), 0);
    // pre-activations 1-2+0+0.5, 0+1+2, 3+0-4-1
    let want = [0.0, 3.0, 0.0];
    for k in 0..3 {
        close(&format!("transform[{k}]"), got[k], want[k], 1e-15)?;
    }
    Ok(())
}

fn attention_weights() -> Result<(), String> {
    // width 1, so the scale is 1
    let rows = array![[1.0], [0.0], [3f64.ln()]];
    let att = trait_attention(rows.view(), 0).map_err(err)?;
    close("weight 0", att.weights[0], 0.25, 1e-12)?;
    close("weight 1", att.weights[1], 0.75, 1e-12)
}

fn sigmoid_example() -> Result<(), String> {
    close("sigmoid(ln 3)", sigmoid(3f64.ln()), 0.75, 1e-15)
}

fn masked_mse_single() -> Result<(), String> {
    let v = masked_mse(array![[0.5, 0.9]].view(), array![[0.0, 0.1]].view(), array![[true, false]].view()).map_err(err)?;
    close("single cell", v, 0.25, 1e-15)
}

fn masked_mse_loop() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b, k) = (6, NUM_TRAITS);
    let p = Array2::from_shape_fn((b, k), |_| rng.random::<f64>());
    let g = Array2::from_shape_fn((b, k), |_| rng.random::<f64>());
    let mut m = Array2::from_shape_fn((b, k), |_| rng.random_bool(0.6));
    m[[0, 0]] = true;
    let (mut sum, mut n) = (0.0, 0.0);
    for i in 0..b {
        for j in 0..k {
            if m[[i, j]] {
                sum += (p[[i, j]] - g[[i, j]]) * (p[[i, j]] - g[[i, j]]);
                n += 1.0;
            }
        }
    }
    close("masked mse", masked_mse(p.view(), g.view(), m.view()).map_err(err)?, sum / n, 1e-14)
}

fn classifier_softmax() -> Result<(), String> {
    let mut c = GradeClassifier::zeros(3, 2);
    c.output.bias = array![0.0, 0.0, 0.0, 3f64.ln()];
    let p = c.classify(array![1.0, 2.0, 3.0].view());
    for k in 0..3 {
        close(&format!("p[{k}]"), p[k], 1.0 / 6.0, 1e-12)?;
    }
    close("p[3]", p[3], 0.5, 1e-12)
}

fn ce_uniform_and_loop() -> Result<(), String> {
    let u = Array2::from_elem((3, NUM_GRADES), 0.25);
    close("uniform ce", cross_entropy(u.view(), &[0, 2, 3]).map_err(err)?, 4f64.ln(), 1e-12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut probs = Array2::from_shape_fn((7, NUM_GRADES), |_| rng.random_range(0.05f64..1.0));
    for mut row in probs.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    let labels: Vec<u8> = (0..7).map(|_| rng.random_range(0..4)).collect();
    let mut sum = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        sum -= probs[[i, l as usize]].ln();
    }
    close("batch ce", cross_entropy(probs.view(), &labels).map_err(err)?, sum / 7.0, 1e-12)
}

fn grl_composed_gradient() -> Result<(), String> {
    let grl = GradientReversal::new(1.0).map_err(err)?;
    let x = 2.0f64;
    let eps = 1e-6;
    // dL/dx of L = x^2 by central differences, then reversed
    let fd = ((x + eps).powi(2) - (x - eps).powi(2)) / (2.0 * eps);
    let g = grl.backward(&array![fd]);
    close("reversed gradient", g[0], -4.0, 1e-6)?;
    ensure(grl.forward(&array![x]) == array![x], "forward is not the identity")
}

fn discriminator_probability() -> Result<(), String> {
    let mut set = DiscriminatorSet::zeros(1, 3, 2);
    set.discriminators[0].output.bias = array![0.0, 3f64.ln()];
    close("p(target)", set.discriminate(array![0.3, -0.1, 2.0].view(), 0).map_err(err)?, 0.75, 1e-12)
}

fn adversarial_at_chance() -> Result<(), String> {
    let set = DiscriminatorSet::zeros(1, 3, 2);
    let h = |v: f64| array![v, 1.0, -v];
    let sources = vec![(0..4).map(|i| h(i as f64)).collect()];
    let target: Vec<_> = (0..4).map(|i| h(-(i as f64))).collect();
    close("8 ln 2", set.adversarial_loss(&sources, &target).map_err(err)?, 8.0 * 2f64.ln(), 1e-12)
}

fn adversarial_loop() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let set = DiscriminatorSet::init(2, 3, 4, &mut rng);
    let vec3 = |rng: &mut ChaCha8Rng| Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
    let sources: Vec<Vec<Array1<f64>>> = (0..2).map(|_| (0..3).map(|_| vec3(&mut rng)).collect()).collect();
    let target: Vec<Array1<f64>> = (0..5).map(|_| vec3(&mut rng)).collect();
    // explicit perceptron arithmetic per discriminator and essay
    let prob_target = |d: &Discriminator, x: &Array1<f64>| {
        let mut hidden = vec![0.0; d.hidden.out_dim()];
        for (r, hv) in hidden.iter_mut().enumerate() {
            let mut z = d.hidden.bias[r];
            for c in 0..3 {
                z += d.hidden.weight[[r, c]] * x[c];
            }
            *hv = z.max(0.0);
        }
        let mut logits = [0.0; 2];
        for (o, l) in logits.iter_mut().enumerate() {
            *l = d.output.bias[o] + hidden.iter().enumerate().map(|(r, v)| d.output.weight[[o, r]] * v).sum::<f64>();
        }
        1.0 / (1.0 + (logits[0] - logits[1]).exp())
    };
    let mut want = 0.0;
    for (i, d) in set.discriminators.iter().enumerate() {
        for x in &sources[i] {
            want -= (1.0 - prob_target(d, x)).ln();
        }
        for x in &target {
            want -= prob_target(d, x).ln();
        }
    }
    close("adversarial loss", set.adversarial_loss(&sources, &target).map_err(err)?, want, 1e-10)?;
    let (l, _, _) = disc_term(&set.discriminators[0], target[0].view(), true);
    close("single term", l, -prob_target(&set.discriminators[0], &target[0]).ln(), 1e-12)
}

fn sharpen_example() -> Result<(), String> {
    let p = sharpen(array![0.8, 0.2].view(), 2.0).map_err(err)?;
    close("p[0]", p[0], 0.64 / 0.68, 1e-12)?;
    close("p[1]", p[1], 0.04 / 0.68, 1e-12)?;
    close("p[0] to 4 places", (p[0] * 1e4).round() / 1e4, 0.9412, 0.0)
}

fn bank_reinit_bitwise() -> Result<(), String> {
    let dims = tiny_dims();
    let backend = tiny_backend(2);
    let (_, target) = tiny_essays(6, &dims, 8);
    let params = Params::init(dims, &TINY_TOPICS, 17).map_err(err)?;
    let a = init_bank(&params, backend.as_ref(), &target, 0.9, 2.0).map_err(err)?;
    let params_again = Params::init(dims, &TINY_TOPICS, 17).map_err(err)?;
    let b = init_bank(&params_again, backend.as_ref(), &target, 0.9, 2.0).map_err(err)?;
    let bits = |m: &MemoryBank| -> Vec<u64> {
        m.entries().iter().flat_map(|e| e.feature.iter().chain(e.soft_label.iter()).map(|v| v.to_bits())).collect()
    };
    ensure(bits(&a) == bits(&b), "bank differs between identical initializations")
}

fn ema_example() -> Result<(), String> {
    let ids = vec!["a".to_string(), "b".to_string()];
    let feats = vec![array![1.0], array![1.0]];
    let probs = vec![array![1.0, 0.0], array![0.0, 1.0]];
    let mut bank = MemoryBank::from_predictions(&ids, &feats, &probs, 0.9, 1.0).map_err(err)?;
    bank.update_raw("a", array![0.0].view(), array![0.0, 1.0].view(), 0.9).map_err(err)?;
    let e = bank.get("a").ok_or("entry a vanished")?;
    close("feature", e.feature[0], 0.9, 1e-15)?;
    close("soft[0]", e.soft_label[0], 0.9, 1e-15)
}

fn knn_example() -> Result<(), String> {
    let ids: Vec<String> = ["q", "n1", "n2", "far"].iter().map(|s| s.to_string()).collect();
    let feats = vec![array![1.0, 0.0], array![1.0, 0.1], array![1.0, -0.2], array![-1.0, 0.0]];
    let probs = vec![array![0.25, 0.25, 0.25, 0.25], array![0.6, 0.4, 0.0, 0.0], array![0.2, 0.8, 0.0, 0.0], array![0.0, 0.0, 0.0, 1.0]];
    let bank = MemoryBank::from_predictions(&ids, &feats, &probs, 0.9, 1.0).map_err(err)?;
    let pl = bank.knn_pseudo_label(array![1.0, 0.0].view(), "q", 2).map_err(err)?;
    for (k, want) in [0.4, 0.6, 0.0, 0.0].into_iter().enumerate() {
        close(&format!("soft[{k}]"), pl.soft[k], want, 1e-12)?;
    }
    ensure(pl.class == 1, format!("class {}", pl.class))
}

fn target_ce_examples() -> Result<(), String> {
    let u = Array2::from_elem((5, NUM_GRADES), 0.25);
    close("uniform, |T| = 1", target_ce_loss(u.view(), &[0; 5], 1).map_err(err)?, 5.0 * 4f64.ln(), 1e-12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dims = tiny_dims();
    let backend = tiny_backend(3);
    let (_, target) = tiny_essays(5, &dims, 30);
    let params = Params::init(dims, &TINY_TOPICS, 2).map_err(err)?;
    let bank = init_bank(&params, backend.as_ref(), &target, 0.9, 2.0).map_err(err)?;
    let mut probs = Array2::zeros((5, NUM_GRADES));
    let mut labels = Vec::new();
    let mut want = 0.0;
    for (i, e) in target.iter().enumerate() {
        let pass = forward_essay(&params, backend.as_ref(), e).map_err(err)?;
        probs.row_mut(i).assign(&pass.classifier.probs);
        let (label, _, _) = brute_force_pseudo_label(&bank, &pass.h, &e.essay_id, 2);
        labels.push(label);
        want -= pass.classifier.probs[label as usize].ln();
    }
    let size = rng.random_range(5..50);
    close("bank target ce", target_ce_loss(probs.view(), &labels, size).map_err(err)?, want / size as f64, 1e-12)
}

fn total_loss_example() -> Result<(), String> {
    close("total", total_loss(1.0, 0.1, 0.2, 10.0, 1.0), 2.2, 1e-12)
}

fn small_trainer(seed: u64, essays: usize, config: TrainConfig) -> Result<Trainer, String> {
    synthetic_trainer(&small_spec(essays, seed), config).map_err(err)
}

fn beta_zero_keeps_discriminators() -> Result<(), String> {
    let mut config = small_config(1, 8);
    config.beta = 0.0;
    let mut t = small_trainer(1, 24, config)?;
    let before = t.state.params.group_hash(Group::Discriminators);
    let shared_before = t.state.params.group_hash(Group::Shared);
    t.shared_phase().map_err(err)?;
    ensure(t.state.params.group_hash(Group::Discriminators) == before, "discriminators moved with beta = 0")?;
    ensure(t.state.params.group_hash(Group::Shared) != shared_before, "the shared prompt did not train")
}

fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        num += (i as f64 - mx) * (y - my);
        den += (i as f64 - mx).powi(2);
    }
    num / den
}

/// Shared-phase `L_total` for the first `steps` iterations.
pub fn shared_loss_curve(trainer: &mut Trainer, steps: usize) -> Result<Vec<f64>, String> {
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let rows = trainer.step(&mut |_| {}).map_err(err)?;
        ensure(rows[0].phase == Phase::Shared, "first row should be the shared phase")?;
        out.push(rows[0].l_total);
    }
    Ok(out)
}

/// Negative slope and a lower late mean than early mean.
pub fn loss_trend_decreases(curve: &[f64]) -> bool {
    let w = (curve.len() / 5).max(1);
    let head = curve[..w].iter().sum::<f64>() / w as f64;
    let tail = curve[curve.len() - w..].iter().sum::<f64>() / w as f64;
    least_squares_slope(curve) < 0.0 && tail < head
}

fn loss_decreases_over_50_steps() -> Result<(), String> {
    let mut slopes = Vec::new();
    for seed in 0..5 {
        let mut config = small_config(seed, 8);
        config.epochs = 100;
        let mut t = small_trainer(seed, 40, config)?;
        let curve = shared_loss_curve(&mut t, 50)?;
        slopes.push(least_squares_slope(&curve));
    }
    slopes.sort_by(f64::total_cmp);
    ensure(slopes[2] < 0.0, format!("median slope {} is not negative", slopes[2]))
}

fn target_gradient_stays_in_its_slice() -> Result<(), String> {
    let dims = tiny_dims();
    let backend = tiny_backend(4);
    let (_, target) = tiny_essays(3, &dims, 40);
    let params = Params::init(dims, &TINY_TOPICS, 6).map_err(err)?;
    let batch = Batch {
        sources: vec![Vec::new(), Vec::new()],
        target: target.iter().collect(),
    };
    let fwd = forward_batch(&params, backend.as_ref(), &batch).map_err(err)?;
    let weights = LossWeights { ce: 1.0, mse: 0.0, adv: 0.0 };
    let (_, grads) = batch_objective(&params, backend.as_ref(), &batch, &fwd, Some(&[0, 1, 3]), 3, weights, None).map_err(err)?;
    for slot in 0..2 {
        ensure(grads.prompts.specific[slot].iter().all(|&v| v == 0.0), format!("source slot {slot} received target gradient"))?;
    }
    ensure(grads.prompts.specific[2].iter().any(|&v| v != 0.0), "target slot received no gradient")
}

fn alpha_zero_leaves_head_outputs() -> Result<(), String> {
    let dims = tiny_dims();
    let backend = tiny_backend(4);
    let (sources, target) = tiny_essays(3, &dims, 41);
    let params = Params::init(dims, &TINY_TOPICS, 6).map_err(err)?;
    let batch = batch_of(&sources, &target);
    let fwd = forward_batch(&params, backend.as_ref(), &batch).map_err(err)?;
    let weights = LossWeights { ce: 1.0, mse: 0.0, adv: 1.0 };
    let grl = GradientReversal::new(1.0).map_err(err)?;
    let (_, grads) =
        batch_objective(&params, backend.as_ref(), &batch, &fwd, Some(&[0, 1, 2]), 3, weights, Some(AdvRouting::Reversed(grl)))
            .map_err(err)?;
    let norm: f64 = grads
        .tensors()
        .iter()
        .filter(|t| t.name.starts_with("heads.output."))
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum();
    ensure(norm == 0.0, format!("head output gradient norm^2 {norm}"))
}

fn learning_rate_at_2000() -> Result<(), String> {
    let s = TrainConfig::default().schedule();
    close("lr(1999)", s.rate(1999), 0.01, 0.0)?;
    close("lr(2000)", s.rate(2000), 0.01 * 0.9, 1e-15)
}

fn qwk_examples() -> Result<(), String> {
    close("reversed pair", qwk(&[2, 0], &[0, 2], 0, 2).map_err(err)?, -1.0, 1e-12)?;
    close("reversed pair oracle", reference_qwk(&[2, 0], &[0, 2], 0, 2), -1.0, 1e-12)?;
    let (p, g) = ([0, 1, 2, 2], [0, 1, 2, 3]);
    close("four essays", qwk(&p, &g, 0, 3).map_err(err)?, reference_qwk(&p, &g, 0, 3), 1e-12)
}

fn report_averages() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cells = vec![vec![None; NUM_TRAITS]; 4];
    let mut topics = Vec::new();
    for (i, row) in cells.iter_mut().enumerate() {
        let mut traits = std::collections::BTreeMap::new();
        for (j, cell) in row.iter_mut().enumerate() {
            if j == 0 || rng.random_bool(0.5) {
                let v = rng.random_range(-0.2..1.0);
                *cell = Some(v);
                traits.insert(Trait::ALL[j], v);
            }
        }
        topics.push(TopicReport {
            topic_id: i as u32 + 1,
            num_essays: 10,
            traits,
            class_accuracy: None,
            class_qwk: None,
        });
    }
    let report = Report { topics };
    let mut row_means = Vec::new();
    for row in &cells {
        let vals: Vec<f64> = row.iter().flatten().copied().collect();
        row_means.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    for (i, t) in report.topics.iter().enumerate() {
        close(&format!("topic {} average", t.topic_id), t.average().ok_or("no average")?, row_means[i], 1e-12)?;
    }
    close("grand average", report.topic_grand_average().ok_or("no grand average")?, row_means.iter().sum::<f64>() / 4.0, 1e-12)?;
    let mut col_means = Vec::new();
    for j in 0..NUM_TRAITS {
        let vals: Vec<f64> = cells.iter().filter_map(|r| r[j]).collect();
        match report.trait_average(Trait::ALL[j]) {
            None => ensure(vals.is_empty(), format!("trait {j} lost its average"))?,
            Some(v) => {
                let want = vals.iter().sum::<f64>() / vals.len() as f64;
                close(&format!("trait {j} average"), v, want, 1e-12)?;
                col_means.push(want);
            }
        }
    }
    close(
        "trait grand average",
        report.trait_grand_average().ok_or("no trait grand average")?,
        col_means.iter().sum::<f64>() / col_means.len() as f64,
        1e-12,
    )
}

fn embedding_dump_matches_forward() -> Result<(), String> {
    let dims = tiny_dims();
    let backend = tiny_backend(5);
    let (sources, target) = tiny_essays(3, &dims, 50);
    let params = Params::init(dims, &TINY_TOPICS, 9).map_err(err)?;
    let essays: Vec<_> = sources.into_iter().flatten().chain(target).collect();
    let dir = std::env::temp_dir().join(format!("xtopic-dump-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(err)?;
    let path = dir.join("emb.tsv");
    dump_embeddings(&params, backend.as_ref(), &essays, 3, &path).map_err(err)?;
    let text = std::fs::read_to_string(&path).map_err(err)?;
    let _ = std::fs::remove_dir_all(&dir);
    let lines: Vec<&str> = text.lines().collect();
    ensure(lines.len() == essays.len() + 1, "one line per essay plus a header")?;
    for (line, e) in lines[1..].iter().zip(&essays) {
        let cols: Vec<&str> = line.split('\t').collect();
        ensure(cols[0] == e.essay_id, "essay order differs")?;
        ensure(cols[2] == if e.topic_id == 3 { "1" } else { "0" }, "is_target flag")?;
        let h = forward_essay(&params, backend.as_ref(), e).map_err(err)?.h;
        ensure(cols.len() == 3 + h.len(), "column count")?;
        for (k, c) in cols[3..].iter().enumerate() {
            let v: f64 = c.parse().map_err(err)?;
            close(&format!("{} h{k}", e.essay_id), v, h[k], 1e-6)?;
        }
    }
    Ok(())
}

/// Every worked example in the library's scope, by name.
pub fn examples() -> Vec<(&'static str, Check)> {
    vec![
        ("raw holistic 8 on topic 1 ingests as 0.6", ingest_holistic_unit as Check),
        ("normalize 7 in [2,12] is 0.5", normalize_example),
        ("denormalize examples", denormalize_examples),
        ("0.8 bins to the top class", binning_boundary),
        ("target essays carry no grade", target_has_no_grade),
        ("golden feature vector", golden_features),
        ("standardizer follows a constant shift", standardizer_shift),
        ("standardized fit set is centered", standardized_mean_zero),
        ("50 tokens with 8+8 prompts give 68 positions", sequence_length),
        ("golden h_cls at width 4", golden_h_cls),
        ("identity projection passes h_cls through", identity_projection),
        ("prompt gradient is nonzero and matches differences", prompt_gradient_nonzero),
        ("token order only matters through the pooled mean", permutation_through_mean),
        ("trait transform by hand", trait_transform_by_hand),
        ("attention weights 0.25 and 0.75", attention_weights),
        ("sigmoid(ln 3) is 0.75", sigmoid_example),
        ("single-cell masked regression loss", masked_mse_single),
        ("masked regression loss matches a double loop", masked_mse_loop),
        ("classifier softmax example", classifier_softmax),
        ("cross-entropy at uniform and against a loop", ce_uniform_and_loop),
        ("reversed gradient of x^2 at 2 is -4", grl_composed_gradient),
        ("discriminator logits (0, ln 3) give 0.75", discriminator_probability),
        ("adversarial loss at chance is 8 ln 2", adversarial_at_chance),
        ("adversarial loss matches a double loop", adversarial_loop),
        ("sharpening [0.8, 0.2] at tau 2", sharpen_example),
        ("bank re-initialization is bitwise stable", bank_reinit_bitwise),
        ("EMA step 1.0 toward 0.0 at 0.9", ema_example),
        ("two-neighbor pseudo-label example", knn_example),
        ("target cross-entropy examples", target_ce_examples),
        ("total loss (1, 0.1, 0.2, 10, 1) is 2.2", total_loss_example),
        ("beta = 0 leaves discriminators unchanged", beta_zero_keeps_discriminators),
        ("shared loss trends down over 50 steps", loss_decreases_over_50_steps),
        ("target gradient only reaches the target slice", target_gradient_stays_in_its_slice),
        ("alpha = 0 leaves head outputs without gradient", alpha_zero_leaves_head_outputs),
        ("learning rate at step 2000", learning_rate_at_2000),
        ("QWK examples", qwk_examples),
        ("report averages match re-aggregation", report_averages),
        ("embedding dump matches a forward pass", embedding_dump_matches_forward),
    ]
}

/// Runs every example and returns the failures.
pub fn run_all() -> Vec<String> {
    examples()
        .into_iter()
        .filter_map(|(name, check)| check().err().map(|e| format!("{name}: {e}")))
        .collect()
}
