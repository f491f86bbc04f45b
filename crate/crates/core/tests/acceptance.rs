//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. The directional criteria share one ablation
//! over the default configuration, which takes roughly 25 minutes.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msd::autograd::{softmax_rows, Tape, Var};
use msd::data::{
    parse_conll, parse_conll_str, render_conll, synth_cipher_corpora, write_conll, LabelScheme, Sentence, Split,
    SynthSizes, Vocab,
};
use msd::evaluation::entity_f1;
use msd::experiment::{
    run_ablation_seed, run_student, run_teacher, sign_test_p, RunConfig, RunOutcome, Workspace, LANGUAGE_MMD_VARIANT,
};
use msd::losses::graph::{final_objective, mmd, student_objective, teacher_objective};
use msd::losses::{mmd_squared, KernelConfig, LossConfig, Preset};
use msd::model::{argmax_rows, EncoderConfig, EncoderWeights, LayeredModel};
use msd::training::{distill_single_channel, EncodedCorpus, History, HistoryRecord};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64())
    })
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

// ---------------------------------------------------------------------------
// 1. MMD against a naive triple loop

fn naive_mmd(s: &Array2<f64>, t: &Array2<f64>, sigma: f64) -> f64 {
    let g = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        let mut d2 = 0.0;
        for k in 0..a.len() {
            d2 += (a[k] - b[k]) * (a[k] - b[k]);
        }
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let (m, n) = (s.nrows() as f64, t.nrows() as f64);
    let (mut ss, mut tt, mut st) = (0.0, 0.0, 0.0);
    for i in 0..s.nrows() {
        for j in 0..s.nrows() {
            ss += g(s.row(i), s.row(j));
        }
    }
    for i in 0..t.nrows() {
        for j in 0..t.nrows() {
            tt += g(t.row(i), t.row(j));
        }
    }
    for i in 0..s.nrows() {
        for j in 0..t.nrows() {
            st += g(s.row(i), t.row(j));
        }
    }
    ss / (m * m) + tt / (n * n) - 2.0 * st / (m * n)
}

fn mmd_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=8);
        let (m, n) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let s = random_matrix(&mut rng, m, d, 2.0);
        let t = random_matrix(&mut rng, n, d, 2.0);
        let sigma = rng.random_range(0.3..3.0);
        let k = KernelConfig::single(sigma);
        let got = mmd_squared(s.view(), t.view(), &k).map_err(|e| e.to_string())?;
        worst = worst.max((got - naive_mmd(&s, &t, sigma)).abs());
        let same = mmd_squared(s.view(), s.view(), &k).map_err(|e| e.to_string())?;
        worst = worst.max(same.abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:.3e}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("max deviation {worst:.1e} over 100 pairs"))
}

// ---------------------------------------------------------------------------
// 2. Gradient checks on a small model

struct GradCase<'a> {
    scheme: &'a LabelScheme,
    source: EncodedCorpus,
    target: EncodedCorpus,
    teacher_probs: BTreeMap<usize, Rc<Array2<f64>>>,
    teacher_cls: Array2<f64>,
    loss: LossConfig,
}

#[derive(Clone, Copy, Debug)]
enum LossKind {
    Teacher,
    StudentKd,
    MmdModel,
    MmdLanguage,
    Final,
}

impl GradCase<'_> {
    fn build(&self, model: &LayeredModel, kind: LossKind, tape: &mut Tape) -> (Var, msd::model::Bindings) {
        let b = model.bind(tape, true);
        let idx: Vec<usize> = (0..self.source.len()).collect();
        let mixture = model.mixture_vars(&b);
        let main = model.main_channel();
        let channels = model.config.active_channels();
        let none: Option<&mut ChaCha8Rng> = None;

        let kd = |tape: &mut Tape| {
            let batch = self.target.batch(&idx);
            let fwd = model.forward(tape, &b, &batch, none).unwrap();
            let rows = Rc::new(batch.valid_positions());
            let probs: BTreeMap<usize, Var> = channels
                .iter()
                .map(|&m| (m, model.channel_probs(tape, &b, &fwd, m, &rows).unwrap()))
                .collect();
            let terms = student_objective(tape, &probs, &self.teacher_probs, main, &mixture, &self.loss).unwrap();
            (terms.total, fwd.cls)
        };
        let none2: Option<&mut ChaCha8Rng> = None;
        let source_cls = |tape: &mut Tape| model.forward(tape, &b, &self.source.batch(&idx), none2).unwrap().cls;

        let root = match kind {
            LossKind::Teacher => {
                let batch = self.source.batch(&idx);
                let fwd = model.forward(tape, &b, &batch, None::<&mut ChaCha8Rng>).unwrap();
                let rows = Rc::new(batch.valid_positions());
                let targets = Rc::new(batch.valid_labels().unwrap());
                let probs: BTreeMap<usize, Var> = channels
                    .iter()
                    .map(|&m| (m, model.channel_probs(tape, &b, &fwd, m, &rows).unwrap()))
                    .collect();
                teacher_objective(tape, &probs, targets, main, &mixture, &self.loss)
                    .unwrap()
                    .total
            }
            LossKind::StudentKd => kd(tape).0,
            LossKind::MmdModel => {
                let s = source_cls(tape);
                let t = tape.constant(self.teacher_cls.clone());
                mmd(tape, t, s, &self.loss).unwrap()
            }
            LossKind::MmdLanguage => {
                let batch = self.target.batch(&idx);
                let s = model.forward(tape, &b, &batch, None::<&mut ChaCha8Rng>).unwrap().cls;
                let t = tape.constant(self.teacher_cls.clone());
                mmd(tape, t, s, &self.loss).unwrap()
            }
            LossKind::Final => {
                let (l_stu, tgt_cls) = kd(tape);
                let src_cls = source_cls(tape);
                let t = tape.constant(self.teacher_cls.clone());
                let mm = mmd(tape, t, src_cls, &self.loss).unwrap();
                let ml = mmd(tape, t, tgt_cls, &self.loss).unwrap();
                final_objective(tape, l_stu, Some(mm), Some(ml), &self.loss).unwrap()
            }
        };
        (root, b)
    }

    fn value(&self, model: &LayeredModel, kind: LossKind) -> f64 {
        let mut tape = Tape::new();
        let (root, _) = self.build(model, kind, &mut tape);
        tape.scalar(root)
    }
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let scheme = LabelScheme::synthetic();
    let sizes = SynthSizes {
        n_train: 3,
        n_dev: 1,
        n_test: 1,
    };
    let (src, tgt) = synth_cipher_corpora(5, sizes, &scheme).map_err(|e| e.to_string())?;
    // Character pieces of the corpus only, so the embedding table stays small.
    let chars: std::collections::BTreeSet<char> = src
        .train
        .sentences()
        .iter()
        .chain(tgt.train.sentences())
        .flat_map(|s| s.tokens.iter().flat_map(|t| t.chars()))
        .collect();
    let pieces = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]
        .map(String::from)
        .into_iter()
        .chain(chars.iter().flat_map(|c| [c.to_string(), format!("##{c}")]));
    let vocab = Vocab::from_pieces(pieces.collect()).map_err(|e| e.to_string())?;
    let max_len = 8;
    let config = EncoderConfig {
        n_layers: 3,
        hidden_dim: 4,
        n_heads: 2,
        ffn_dim: 4,
        n_frozen: 1,
        vocab_size: vocab.len(),
        max_positions: max_len,
        dropout: 0.0,
        ..EncoderConfig::default()
    };
    let base = EncoderWeights::random(&config, 3).map_err(|e| e.to_string())?;
    let mut model = LayeredModel::from_base(&base, &scheme, 4).map_err(|e| e.to_string())?;
    let n_params: usize = model.params.values().map(|v| v.len()).sum();
    ensure(n_params <= 1000, || {
        format!("model has {n_params} parameters ({} pieces)", vocab.len())
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (m, w) in model.mixture() {
        model.params.insert(
            format!("mixture.{m}"),
            Array2::from_elem((1, 1), w + rng.random_range(-0.3..0.3)),
        );
    }
    let source = EncodedCorpus::new(&src.train, &vocab, &scheme, max_len).map_err(|e| e.to_string())?;
    let target = EncodedCorpus::new(&tgt.train, &vocab, &scheme, max_len).map_err(|e| e.to_string())?;
    let n_valid = target
        .batch(&(0..target.len()).collect::<Vec<_>>())
        .valid_positions()
        .len();
    let teacher_probs = model
        .config
        .active_channels()
        .into_iter()
        .map(|m| {
            (
                m,
                Rc::new(softmax_rows(random_matrix(&mut rng, n_valid, scheme.len(), 2.0).view())),
            )
        })
        .collect();
    let case = GradCase {
        scheme: &scheme,
        teacher_cls: random_matrix(&mut rng, source.len(), config.hidden_dim, 1.5),
        source,
        target,
        teacher_probs,
        loss: LossConfig {
            alpha: 0.3,
            beta: 0.3,
            alpha_prime: 0.5,
            beta_prime: 0.5,
            kernel: KernelConfig::multi(vec![0.5, 1.0, 2.0]),
            ..LossConfig::default()
        },
    };
    debug_assert_eq!(case.scheme.len(), 7);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for kind in [
        LossKind::Teacher,
        LossKind::StudentKd,
        LossKind::MmdModel,
        LossKind::MmdLanguage,
        LossKind::Final,
    ] {
        let mut tape = Tape::new();
        let (root, bindings) = case.build(&model, kind, &mut tape);
        let grads = tape.backward(root);
        let reachable: Vec<(String, Array2<f64>)> = model
            .trainable_names()
            .into_iter()
            .filter_map(|n| grads.get(bindings[&n]).map(|g| (n, g.clone())))
            .collect();
        ensure(!reachable.is_empty(), || format!("{kind:?}: no gradients"))?;
        for _ in 0..20 {
            let (name, g) = reachable.choose(&mut rng).unwrap();
            let k = rng.random_range(0..g.len());
            let (r, c) = (k / g.ncols(), k % g.ncols());
            let original = model.params[name][[r, c]];
            model.params.get_mut(name).unwrap()[[r, c]] = original + h;
            let up = case.value(&model, kind);
            model.params.get_mut(name).unwrap()[[r, c]] = original - h;
            let down = case.value(&model, kind);
            model.params.get_mut(name).unwrap()[[r, c]] = original;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g[[r, c]];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            ensure(rel < 1e-4, || {
                format!("{kind:?} {name}[{r},{c}]: analytic {analytic:.6e} numeric {numeric:.6e}")
            })?;
            worst = worst.max(rel);
        }
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "5 losses x 20 coordinates on {n_params} parameters, max relative error {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Ablation identities

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.sizes = SynthSizes {
        n_train: 96,
        n_dev: 32,
        n_test: 32,
    };
    cfg.data.bpe_merges = 150;
    cfg.encoder = EncoderConfig {
        n_layers: 3,
        hidden_dim: 16,
        n_heads: 2,
        ffn_dim: 32,
        n_frozen: 1,
        ..EncoderConfig::default()
    };
    cfg.train.batch_size = 16;
    cfg.train.epochs = 2;
    cfg.train.max_len = 40;
    cfg.train.seed = 7;
    cfg.resolved().expect("valid small config")
}

fn loss_bits(h: &History) -> Vec<u64> {
    h.loss_trace().iter().map(|l| l.to_bits()).collect()
}

fn ablation_exactness() -> Outcome {
    let cfg = small_config();
    let ws = Workspace::prepare(&cfg).map_err(|e| e.to_string())?;
    let mut teachers = BTreeMap::new();
    let mut worst = 0.0f64;
    let mut rows = 0;
    for preset in Preset::ALL {
        let run = cfg.clone().with_preset(preset);
        let aux = run.loss.use_aux_channels;
        if let std::collections::btree_map::Entry::Vacant(slot) = teachers.entry(aux) {
            slot.insert(run_teacher(&ws, &run).map_err(|e| e.to_string())?.0);
        }
        let (_, history) = run_student(&ws, &run, &teachers[&aux]).map_err(|e| e.to_string())?;
        let l = &run.loss;
        for (step, s) in history.steps() {
            ensure(
                s.mmd_model.is_some() == l.use_mmd_model && s.mmd_language.is_some() == l.use_mmd_language,
                || format!("{preset} step {step}: recorded MMD terms do not match flags"),
            )?;
            let expect = l.alpha_prime * s.mmd_model.unwrap_or(0.0) + l.beta_prime * s.mmd_language.unwrap_or(0.0);
            let dev = (s.total - s.objective - expect).abs();
            ensure(dev <= 1e-6, || format!("{preset} step {step}: deviation {dev:.3e}"))?;
            worst = worst.max(dev);
            rows += 1;
        }
        if preset == Preset::Baseline {
            let (student, _) = run_student(&ws, &run, &teachers[&aux]).map_err(|e| e.to_string())?;
            let (single, single_h) = distill_single_channel(
                &teachers[&aux],
                &ws.base,
                &ws.vocab,
                &ws.target.train,
                &ws.target.dev,
                &run.train,
            )
            .map_err(|e| e.to_string())?;
            ensure(loss_bits(&history) == loss_bits(&single_h), || {
                "baseline loss trace differs from single-channel distiller".into()
            })?;
            ensure(student.fingerprint() == single.fingerprint(), || {
                "baseline parameters differ from single-channel distiller".into()
            })?;
        }
    }
    Ok(format!(
        "{rows} step records, max deviation {worst:.1e}; baseline trace bitwise equal"
    ))
}

// ---------------------------------------------------------------------------
// 4. Chunk scoring against a literal conlleval port

fn split(tag: &str) -> (&str, &str) {
    match tag.split_once('-') {
        Some((p, t)) => (p, t),
        None => (tag, ""),
    }
}

fn end_of_chunk(prev: &str, tag: &str, prev_type: &str, ty: &str) -> bool {
    matches!((prev, tag), ("B", "B") | ("B", "O") | ("I", "B") | ("I", "O"))
        || (prev != "O" && prev != "." && prev_type != ty)
}

fn start_of_chunk(prev: &str, tag: &str, prev_type: &str, ty: &str) -> bool {
    matches!((prev, tag), ("B", "B") | ("I", "B") | ("O", "B") | ("O", "I"))
        || (tag != "O" && tag != "." && prev_type != ty)
}

#[derive(Default, Debug, PartialEq)]
struct ChunkCounts {
    correct: BTreeMap<String, usize>,
    guessed: BTreeMap<String, usize>,
    gold: BTreeMap<String, usize>,
}

/// Token stream with sentence boundaries as `O` tokens, as conlleval reads it.
fn conlleval(pred: &[Vec<String>], gold: &[Vec<String>]) -> ChunkCounts {
    let mut c = ChunkCounts::default();
    let mut stream = Vec::new();
    for (p, g) in pred.iter().zip(gold) {
        stream.extend(p.iter().zip(g).map(|(a, b)| (a.as_str(), b.as_str())));
        stream.push(("O", "O"));
    }
    let (mut in_correct, mut last_g, mut last_c, mut last_gt, mut last_ct) = (false, "O", "O", "", "");
    for (guess, corr) in stream {
        let (gtag, gty) = split(guess);
        let (ctag, cty) = split(corr);
        if in_correct {
            let ce = end_of_chunk(last_c, ctag, last_ct, cty);
            let ge = end_of_chunk(last_g, gtag, last_gt, gty);
            if ce && ge && last_gt == last_ct {
                in_correct = false;
                *c.correct.entry(last_ct.to_string()).or_default() += 1;
            } else if ce != ge || gty != cty {
                in_correct = false;
            }
        }
        let cs = start_of_chunk(last_c, ctag, last_ct, cty);
        let gs = start_of_chunk(last_g, gtag, last_gt, gty);
        if cs && gs && gty == cty {
            in_correct = true;
        }
        if cs {
            *c.gold.entry(cty.to_string()).or_default() += 1;
        }
        if gs {
            *c.guessed.entry(gty.to_string()).or_default() += 1;
        }
        (last_g, last_c, last_gt, last_ct) = (gtag, ctag, gty, cty);
    }
    c
}

fn random_tags(rng: &mut impl Rng, n: usize) -> Vec<String> {
    let tags = LabelScheme::synthetic().tags().to_vec();
    (0..n).map(|_| tags.choose(rng).unwrap().clone()).collect()
}

fn evaluation_parity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut malformed = 0;
    for fixture in 0..50 {
        let n_sent = rng.random_range(1..=6);
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..n_sent {
            let n = rng.random_range(1..=15);
            let g = random_tags(&mut rng, n);
            let p: Vec<String> = if rng.random_bool(0.3) {
                random_tags(&mut rng, n)
            } else {
                let noise = random_tags(&mut rng, n);
                g.iter()
                    .zip(noise)
                    .map(|(a, b)| if rng.random_bool(0.25) { b } else { a.clone() })
                    .collect()
            };
            malformed += [&g, &p]
                .iter()
                .flat_map(|s| {
                    s.windows(2)
                        .filter(|w| w[1].starts_with("I-") && split(&w[0]).1 != split(&w[1]).1)
                })
                .count();
            gold.push(g);
            pred.push(p);
        }
        let ours = entity_f1(&pred, &gold).map_err(|e| e.to_string())?;
        let reference = conlleval(&pred, &gold);
        let total = |m: &BTreeMap<String, usize>| m.values().sum::<usize>();
        let o = &ours.overall.counts;
        ensure(
            (o.correct, o.predicted, o.gold)
                == (
                    total(&reference.correct),
                    total(&reference.guessed),
                    total(&reference.gold),
                ),
            || format!("fixture {fixture}: overall counts {o:?} vs reference {reference:?}"),
        )?;
        for (ty, s) in &ours.per_type {
            let get = |m: &BTreeMap<String, usize>| m.get(ty).copied().unwrap_or(0);
            ensure(
                (s.counts.correct, s.counts.predicted, s.counts.gold)
                    == (get(&reference.correct), get(&reference.guessed), get(&reference.gold)),
                || format!("fixture {fixture}: {ty} counts differ"),
            )?;
        }
    }
    Ok(format!("50 fixtures identical, {malformed} malformed I- transitions"))
}

// ---------------------------------------------------------------------------
// 5, 6, 8. Directional checks over the default ablation

struct Ablation {
    outcomes: Vec<RunOutcome>,
    elapsed: Duration,
}

impl Ablation {
    fn run() -> Result<Self, String> {
        let start = Instant::now();
        let cfg = RunConfig::default().resolved().map_err(|e| e.to_string())?;
        let ws = Workspace::prepare(&cfg).map_err(|e| e.to_string())?;
        let mut outcomes = Vec::new();
        for &seed in &cfg.ablation.seeds {
            let mut progress = |m: &str| eprintln!("  [{:>6.0}s] {m}", start.elapsed().as_secs_f64());
            outcomes.extend(run_ablation_seed(&ws, &cfg, seed, &mut progress).map_err(|e| e.to_string())?);
        }
        Ok(Ablation {
            outcomes,
            elapsed: start.elapsed(),
        })
    }

    fn values(&self, variant: &str, f: fn(&RunOutcome) -> f64) -> Vec<f64> {
        self.outcomes.iter().filter(|o| o.variant == variant).map(f).collect()
    }

    fn mean(&self, variant: &str, f: fn(&RunOutcome) -> f64) -> f64 {
        let v = self.values(variant, f);
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn f1(o: &RunOutcome) -> f64 {
    o.target_test_f1
}

fn directionality(ab: &Ablation) -> Outcome {
    let means: BTreeMap<Preset, f64> = Preset::ALL.iter().map(|&p| (p, ab.mean(p.as_str(), f1))).collect();
    let listing = Preset::ALL
        .iter()
        .map(|p| format!("{p} {:.4}", means[p]))
        .collect::<Vec<_>>()
        .join(", ");
    let full = means[&Preset::Full];
    let base = means[&Preset::Baseline];
    let mut problems = Vec::new();
    for p in [Preset::NoDistillers, Preset::NoMmdLanguage, Preset::NoMmdModel] {
        if full < means[&p] {
            problems.push(format!("full < {p}"));
        }
        if means[&p] < base {
            problems.push(format!("{p} < baseline"));
        }
    }
    let diffs: Vec<f64> = ab
        .values("full", f1)
        .iter()
        .zip(ab.values("baseline", f1))
        .map(|(a, b)| a - b)
        .collect();
    let p = sign_test_p(&diffs);
    if !(full > base && p < 0.05) {
        problems.push(format!("sign test full > baseline p = {p:.4}"));
    }
    if ab.elapsed >= Duration::from_secs(30 * 60) {
        problems.push(format!("runtime {:.0}s", ab.elapsed.as_secs_f64()));
    }
    let detail = format!("{listing}; sign test p = {p:.4}; {:.0}s", ab.elapsed.as_secs_f64());
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", problems.join(", ")))
    }
}

fn diagnostics_directionality(ab: &Ablation) -> Outcome {
    let src = |o: &RunOutcome| o.mmd_tea_src_stu_src;
    let tgt = |o: &RunOutcome| o.mmd_tea_src_stu_tgt;
    let (f_src, m_src) = (ab.mean("full", src), ab.mean("no_mmd_model", src));
    let (f_tgt, l_tgt) = (ab.mean("full", tgt), ab.mean("no_mmd_language", tgt));
    let detail = format!(
        "MMD(tea_src, stu_src) full {f_src:.3e} vs no_mmd_model {m_src:.3e}; MMD(tea_src, stu_tgt) full {f_tgt:.3e} vs no_mmd_language {l_tgt:.3e}"
    );
    if f_src < m_src && f_tgt < l_tgt {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn distillers_vs_language_mmd_teacher(ab: &Ablation) -> Outcome {
    let nd = ab.mean("no_distillers", f1);
    let lm = ab.mean(LANGUAGE_MMD_VARIANT, f1);
    let detail = format!("no_distillers {nd:.4} vs language-MMD teacher {lm:.4}");
    if nd >= lm {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 7. Invariant suites

fn invariant_suites() -> Outcome {
    let start = Instant::now();
    let cfg = small_config();
    let ws = Workspace::prepare(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    // Channel outputs are distributions.
    let model = LayeredModel::from_base(&ws.base, &ws.scheme, 9).map_err(|e| e.to_string())?;
    let data =
        EncodedCorpus::new(&ws.target.test, &ws.vocab, &ws.scheme, cfg.train.max_len).map_err(|e| e.to_string())?;
    let mut rows = 0;
    for idx in data.chunks(16) {
        let (probs, _) = model
            .valid_channel_probs(&data.batch(&idx), &model.config.active_channels())
            .map_err(|e| e.to_string())?;
        for p in probs.values() {
            for row in p.rows() {
                ensure(row.iter().all(|&x| x >= 0.0) && (row.sum() - 1.0).abs() <= 1e-6, || {
                    "channel row is not a distribution".into()
                })?;
                rows += 1;
            }
        }
    }

    // Predictions ignore a uniform shift of the output logits.
    let batch = data.batch(&(0..data.len()).collect::<Vec<_>>());
    let mut shifted = model.clone();
    let main = model.main_channel();
    let mut terminal = shifted.terminal(main).map_err(|e| e.to_string())?;
    terminal.bias += 3.5;
    shifted.set_terminal(main, &terminal).map_err(|e| e.to_string())?;
    ensure(
        model.predict_tags(&batch).map_err(|e| e.to_string())?
            == shifted.predict_tags(&batch).map_err(|e| e.to_string())?,
        || "predictions changed under a logit shift".into(),
    )?;

    // Frozen parameters stay bitwise identical; training is reproducible.
    let (t1, h1) = run_teacher(&ws, &cfg).map_err(|e| e.to_string())?;
    let (t2, h2) = run_teacher(&ws, &cfg).map_err(|e| e.to_string())?;
    ensure(t1.frozen_params() == model.frozen_params(), || {
        "teacher moved frozen parameters".into()
    })?;
    ensure(
        t1.fingerprint() == t2.fingerprint() && loss_bits(&h1) == loss_bits(&h2),
        || "teacher training is not deterministic".into(),
    )?;
    let teacher_hash = t1.fingerprint();
    let (s1, g1) = run_student(&ws, &cfg, &t1).map_err(|e| e.to_string())?;
    let (s2, g2) = run_student(&ws, &cfg, &t1).map_err(|e| e.to_string())?;
    ensure(s1.frozen_params() == model.frozen_params(), || {
        "student moved frozen parameters".into()
    })?;
    ensure(
        s1.fingerprint() == s2.fingerprint() && loss_bits(&g1) == loss_bits(&g2),
        || "distillation is not deterministic".into(),
    )?;
    ensure(t1.fingerprint() == teacher_hash, || {
        "distillation changed the teacher".into()
    })?;
    let mixture_moved = h1.epochs().all(
        |r| matches!(r, HistoryRecord::Epoch { mixture, .. } if mixture.values().all(|&l| l.is_finite() && l != 1.0)),
    );
    ensure(mixture_moved, || "mixture weights did not move".into())?;

    // CoNLL round trip on written files and on random sentences.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, corpus) in [&ws.source.train, &ws.source.test, &ws.target.train]
        .into_iter()
        .enumerate()
    {
        let path = dir.path().join(format!("{i}.conll"));
        write_conll(corpus, &path).map_err(|e| e.to_string())?;
        let back = parse_conll(&path, &ws.scheme, corpus.language(), corpus.split()).map_err(|e| e.to_string())?;
        ensure(back.sentences() == corpus.sentences(), || {
            format!("round trip failed for corpus {i}")
        })?;
    }
    for _ in 0..200 {
        let sentences: Vec<Sentence> = (0..rng.random_range(1..5))
            .map(|_| {
                let n = rng.random_range(1..10);
                let toks = (0..n).map(|_| format!("w{}", rng.random_range(0..1000))).collect();
                Sentence::labeled(toks, random_tags(&mut rng, n))
            })
            .collect();
        let mut buf = Vec::new();
        render_conll(&sentences, &mut buf).map_err(|e| e.to_string())?;
        let back = parse_conll_str(std::str::from_utf8(&buf).unwrap(), "mem", &ws.scheme, "x", Split::Dev)
            .map_err(|e| e.to_string())?;
        ensure(back.sentences() == &sentences[..], || "random round trip failed".into())?;
    }

    // Ties resolve to the lowest index.
    for _ in 0..500 {
        let n = rng.random_range(2..10);
        let mut row: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        row[i] = 1.5;
        row[j] = 1.5;
        let m = Array2::from_shape_vec((1, n), row).unwrap();
        ensure(argmax_rows(m.view())[0] == i.min(j), || {
            "argmax tie not resolved to lowest index".into()
        })?;
    }

    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "{rows} distribution rows, 2x teacher + 2x student runs, 203 round trips, 500 ties; {:.0}s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // `--list` must not trigger the gate; `quick` leaves out the ablation.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, r: Outcome| {
        match &r {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => println!("FAIL  {name}: {d}"),
        }
        results.push((name, r));
    };

    report("1 mmd oracle", guarded(mmd_oracle));
    report("2 gradient checks", guarded(gradient_checks));
    report("3 ablation exactness", guarded(ablation_exactness));
    report("4 evaluation parity", guarded(evaluation_parity));
    report("7 invariant suites", guarded(invariant_suites));

    if args.iter().any(|a| a == "quick") {
        println!("SKIP  5, 6, 8: ablation not run in quick mode");
        let failed = results.iter().filter(|(_, r)| r.is_err()).count();
        std::process::exit(i32::from(failed > 0));
    }
    eprintln!("running the 5-seed ablation over the default configuration");
    let ablation = catch_unwind(AssertUnwindSafe(Ablation::run)).unwrap_or_else(|_| Err("ablation panicked".into()));
    match &ablation {
        Ok(ab) => {
            report("5 end-to-end directionality", guarded(|| directionality(ab)));
            report(
                "6 diagnostics directionality",
                guarded(|| diagnostics_directionality(ab)),
            );
            report(
                "8 distillers vs language-MMD teacher",
                guarded(|| distillers_vs_language_mmd_teacher(ab)),
            );
        }
        Err(e) => {
            for name in [
                "5 end-to-end directionality",
                "6 diagnostics directionality",
                "8 distillers vs language-MMD teacher",
            ] {
                report(name, Err(format!("ablation failed: {e}")));
            }
        }
    }

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
