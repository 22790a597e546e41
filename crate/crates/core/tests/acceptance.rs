//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p title-forge --test acceptance`. Set
//! `TITLE_FORGE_RQ2_DUMP=<Posts.xml>` to run the non-blocking modality
//! ordering check on a real dump.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use title_forge::corpus::{mine, split_corpus, Language, PostTriplet};
use title_forge::decoding::{beam_search, exhaustive_search, greedy_decode, BeamConfig};
use title_forge::evaluation::{
    corpus_rouge, evaluate, lcs_len, rouge_l, rouge_n, Bm25Index, ModelGenerator, Prf,
};
use title_forge::model::{ModelConfig, Seq2Seq};
use title_forge::par;
use title_forge::tensor::{ParamStore, Tape};
use title_forge::tokenizer::{InputMode, SubwordVocabulary, TokenId};
use title_forge::training::{
    fit, multi_task_loss, multi_task_loss_var, prepare_examples, task_loss, task_loss_var, Example, TaskBatch,
    TaskSets, Trainer, TrainingConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    name: &'static str,
    blocking: bool,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "scope_statement_in_readme", blocking: true, run: readme_scope },
        Criterion { name: "gradient_fidelity", blocking: true, run: gradient_fidelity },
        Criterion { name: "overfit_smoke", blocking: true, run: overfit_smoke },
        Criterion { name: "beam_correctness", blocking: true, run: beam_correctness },
        Criterion { name: "metric_oracles", blocking: true, run: metric_oracles },
        Criterion { name: "tokenizer_roundtrip", blocking: true, run: tokenizer_roundtrip },
        Criterion { name: "corpus_filter_fixture", blocking: true, run: corpus_filter_fixture },
        Criterion { name: "multi_task_loss_and_freeze", blocking: true, run: multi_task_loss_and_freeze },
        Criterion { name: "modality_ordering", blocking: false, run: modality_ordering },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed_blocking = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = (c.run)();
        let status = if out.pass { "PASS" } else { "FAIL" };
        let tag = if c.blocking { "" } else { " [non-blocking]" };
        println!("{status} {}{tag} ({:.1}s): {}", c.name, start.elapsed().as_secs_f64(), out.detail);
        if !out.pass && c.blocking {
            failed_blocking += 1;
        }
    }
    if failed_blocking > 0 {
        std::process::exit(1);
    }
}

fn readme_scope() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Outcome::new(false, format!("{} not readable", path.display()));
    };
    let needles = ["27.262", "pre-trained T5", "240k"];
    let missing: Vec<&str> = needles.iter().copied().filter(|n| !text.contains(n)).collect();
    Outcome::new(missing.is_empty(), format!("README mentions {needles:?}; missing {missing:?}"))
}

fn grad_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        vocab_size: 64,
        max_encoder_len: 16,
        max_decoder_len: 8,
        dropout: 0.0,
    }
}

fn random_batches(rng: &mut ChaCha8Rng, vocab: TokenId, per_task: usize, max_src: usize, max_title: usize) -> Vec<TaskBatch> {
    Language::ALL
        .iter()
        .map(|&lang| {
            let examples: Vec<Example> = (0..per_task)
                .map(|_| {
                    let sl = rng.gen_range(2..=max_src);
                    let tl = rng.gen_range(1..=max_title);
                    Example {
                        source: (0..sl).map(|_| rng.gen_range(5..vocab)).collect(),
                        title: (0..tl).map(|_| rng.gen_range(5..vocab)).collect(),
                    }
                })
                .collect();
            let refs: Vec<&Example> = examples.iter().collect();
            TaskBatch::new(lang, &refs, max_title + 1)
        })
        .collect()
}

fn combined_loss(model: &Seq2Seq<f64>, batches: &[TaskBatch]) -> f64 {
    let losses: Vec<f64> = batches.iter().map(|b| task_loss(model, b).unwrap()).collect();
    multi_task_loss(&losses).unwrap()
}

/// Relative-error denominator floor: gradients smaller than this in
/// magnitude are compared in absolute terms.
const GRAD_REL_FLOOR: f64 = 1e-6;

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let model = Seq2Seq::<f64>::new(grad_config(), 5).unwrap();
    let batches = random_batches(&mut rng, 64, 2, 12, 6);

    let mut tape = Tape::<f64>::new();
    let bound = model.bind(&mut tape);
    let vars: Vec<_> = batches
        .iter()
        .map(|b| task_loss_var(&model, &mut tape, &bound, b, &mut None).unwrap())
        .collect();
    let loss = multi_task_loss_var(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut analytic: ParamStore<f64> = model.params().clone();
    analytic.zero_grads();
    analytic.accumulate(&grads);

    let coords: Vec<(usize, usize)> = model
        .params()
        .iter()
        .flat_map(|(id, p)| (0..p.value().len()).map(move |i| (id.index(), i)))
        .collect();
    let ids: Vec<_> = model.params().ids().collect();
    let check = |&(pi, i): &(usize, usize), eps: f64| {
        let id = ids[pi];
        let g = analytic.grad(id).map_or(0.0, |g| g[i]);
        let mut plus = model.clone();
        plus.params_mut().value_mut(id).data_mut()[i] += eps;
        let mut minus = model.clone();
        minus.params_mut().value_mut(id).data_mut()[i] -= eps;
        let numeric = (combined_loss(&plus, &batches) - combined_loss(&minus, &batches)) / (2.0 * eps);
        let err = (numeric - g).abs() / numeric.abs().max(g.abs()).max(GRAD_REL_FLOOR);
        (err, g, numeric)
    };
    let errors = par::map(&coords, |c| check(c, 1e-3));
    let failing: Vec<usize> = (0..coords.len()).filter(|&k| errors[k].0 > 1e-4).collect();
    let (worst_at, worst) = errors
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |acc, (k, e)| if e.0 > acc.1 { (k, e.0) } else { acc });
    let (pi, i) = coords[worst_at];
    let (_, g, numeric) = errors[worst_at];
    let name = model.params().get(ids[pi]).name().to_string();
    let mut detail = format!(
        "{} scalars in {} tensors at eps 1e-3: {} exceed 1e-4, max rel err {worst:.3e} at {name}[{i}] (analytic {g:.3e}, numeric {numeric:.3e}; floor {GRAD_REL_FLOOR:e})",
        coords.len(),
        ids.len(),
        failing.len(),
    );
    if !failing.is_empty() {
        // A ±1e-3 step can carry a ReLU input across zero, where the loss is
        // not differentiable. Re-checking those coordinates with a much
        // smaller step tells kink crossings apart from wrong gradients.
        let fine: Vec<(usize, usize)> = failing.iter().map(|&k| coords[k]).collect();
        let recheck = par::map(&fine, |c| check(c, 1e-6).0);
        let still = recheck.iter().filter(|&&e| e > 1e-4).count();
        let max_fine = recheck.iter().copied().fold(0.0, f64::max);
        detail.push_str(&format!(
            "; re-checked at eps 1e-6: {still}/{} still exceed 1e-4 (max {max_fine:.3e})",
            failing.len()
        ));
    }
    Outcome::new(failing.is_empty(), detail)
}

const NOUNS: [&str; 16] = [
    "list", "map", "array", "string", "file", "thread", "socket", "date", "json", "regex", "queue", "stack", "tree",
    "graph", "matrix", "buffer",
];
const VERBS: [&str; 8] = ["sort", "reverse", "parse", "copy", "merge", "split", "filter", "clone"];

fn synthetic_triplets(per_task: usize) -> Vec<PostTriplet> {
    let mut out = Vec::new();
    for lang in Language::ALL {
        for i in 0..per_task {
            let noun = NOUNS[i % NOUNS.len()];
            let verb = VERBS[(i * 3 + lang.index()) % VERBS.len()];
            out.push(PostTriplet {
                post_id: (lang.index() * 1000 + i) as u64,
                language: lang,
                description: format!("I want to {verb} my {noun} but it keeps failing."),
                code: format!("{noun}.{verb}(x{i});"),
                title: format!("How to {verb} a {noun} in {}", lang.as_str()),
            });
        }
    }
    out
}

fn texts_of(triplets: &[PostTriplet]) -> Vec<String> {
    let mut texts: Vec<String> = Language::ALL.iter().map(|l| l.prefix().to_string()).collect();
    for t in triplets {
        texts.extend([t.description.clone(), t.code.clone(), t.title.clone()]);
    }
    texts
}

fn overfit_smoke() -> Outcome {
    let triplets = synthetic_triplets(16);
    let vocab = SubwordVocabulary::train_up_to(&texts_of(&triplets), 400).unwrap();
    let config = TrainingConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        dropout: 0.0,
        ..TrainingConfig::default()
    };
    let mut model = Seq2Seq::<f32>::new(config.model_config(vocab.len()), config.seed).unwrap();
    let mut sets = TaskSets::default();
    for lang in Language::ALL {
        let mine: Vec<PostTriplet> = triplets.iter().filter(|t| t.language == lang).cloned().collect();
        *sets.get_mut(lang) = prepare_examples(&vocab, &mine, InputMode::Both, config.max_encoder_len);
    }
    let max_dec = model.config().max_decoder_len;
    let batches: Vec<TaskBatch> = Language::ALL
        .iter()
        .map(|&l| TaskBatch::new(l, &sets.get(l).iter().collect::<Vec<_>>(), max_dec))
        .collect();
    let mut trainer = Trainer::new(&config);
    let references: Vec<&str> = triplets.iter().map(|t| t.title.as_str()).collect();
    let sources: Vec<&[TokenId]> = Language::ALL
        .iter()
        .flat_map(|&l| sets.get(l).iter().map(|e| e.source.as_slice()))
        .collect();
    let mut last = (0.0, 0.0, 0);
    let mut first_loss = None;
    let mut final_loss = 0.0;
    for step in 1..=2000 {
        let (_, combined, _) = trainer.step(&mut model, &batches).unwrap();
        first_loss.get_or_insert(combined);
        final_loss = combined;
        if step % 100 == 0 {
            let generated = par::map(&sources, |src| {
                let cond = model.condition(src).unwrap();
                let hyp = greedy_decode(&cond, max_dec).unwrap();
                vocab.decode(hyp.title_ids()).unwrap().trim().to_string()
            });
            let exact = generated.iter().zip(&references).filter(|(g, r)| g == r).count() as f64
                / references.len() as f64;
            let rl = corpus_rouge(&generated.iter().map(String::as_str).collect::<Vec<_>>(), &references)
                .unwrap()
                .as_percentages()
                .rouge_l
                .f1;
            last = (exact, rl, step);
            if exact >= 0.9 && rl >= 95.0 {
                break;
            }
        }
    }
    let (exact, rl, steps) = last;
    Outcome::new(
        exact >= 0.9 && rl >= 95.0,
        format!(
            "{steps} steps, loss {:.3} -> {final_loss:.4}, exact {:.1}% (need 90), Rouge-L {rl:.3} (need 95.0)",
            first_loss.unwrap_or(f64::NAN),
            exact * 100.0
        ),
    )
}

fn beam_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = Vec::new();
    let mut worst = 0.0f64;
    for m in 0..100u64 {
        let model = Seq2Seq::<f32>::new(ModelConfig::toy(6), 1000 + m).unwrap();
        let len = rng.gen_range(1..6);
        let src: Vec<TokenId> = (0..len).map(|_| rng.gen_range(3..6)).collect();
        let cond = model.condition(&src).unwrap();
        let cfg = BeamConfig {
            beam_width: 216,
            max_len: 3,
            alpha: 1.0,
        };
        let beam = beam_search(&cond, &cfg).unwrap();
        let all = exhaustive_search(&cond, 3, cfg.alpha).unwrap();
        let (b, e) = (&beam[0], &all[0]);
        let diff = (b.normalized_score(cfg.alpha) - e.normalized_score(cfg.alpha)).abs();
        worst = worst.max(diff);
        if b.token_ids != e.token_ids || diff > 1e-6 {
            mismatches.push(format!("model {m}"));
        }
    }
    let mut greedy_mismatch = 0;
    let models: Vec<Seq2Seq<f32>> = (0..10).map(|s| Seq2Seq::new(grad_config(), 500 + s).unwrap()).collect();
    for k in 0..100 {
        let model = &models[k % models.len()];
        let len = rng.gen_range(1..16);
        let src: Vec<TokenId> = (0..len).map(|_| rng.gen_range(5..64)).collect();
        let cond = model.condition(&src).unwrap();
        let g = greedy_decode(&cond, 8).unwrap();
        let b = beam_search(&cond, &BeamConfig { beam_width: 1, max_len: 8, alpha: 1.0 }).unwrap();
        if b[0].token_ids != g.token_ids {
            greedy_mismatch += 1;
        }
    }
    Outcome::new(
        mismatches.is_empty() && greedy_mismatch == 0,
        format!(
            "width 216 vs exhaustive: {}/100 mismatches, max score diff {worst:.2e}; width 1 vs greedy: {greedy_mismatch}/100 mismatches",
            mismatches.len()
        ),
    )
}

fn oracle_prf(overlap: usize, cand: usize, reference: usize) -> Prf {
    if overlap == 0 || cand == 0 || reference == 0 {
        return Prf::default();
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    Prf {
        precision: p,
        recall: r,
        f1: 2.0 * p * r / (p + r),
    }
}

/// Matches each candidate n-gram against a not-yet-used reference n-gram.
fn oracle_rouge_n(c: &[u8], r: &[u8], n: usize) -> Prf {
    fn grams(v: &[u8], n: usize) -> Vec<&[u8]> {
        if v.len() < n {
            Vec::new()
        } else {
            (0..=v.len() - n).map(|i| &v[i..i + n]).collect()
        }
    }
    let cg = grams(c, n);
    let rg = grams(r, n);
    let mut used = vec![false; rg.len()];
    let mut overlap = 0;
    for g in &cg {
        if let Some(j) = (0..rg.len()).find(|&j| !used[j] && rg[j] == *g) {
            used[j] = true;
            overlap += 1;
        }
    }
    oracle_prf(overlap, cg.len(), rg.len())
}

/// Longest candidate subsequence that is also a subsequence of the
/// reference, by enumerating every subset of candidate positions.
fn oracle_lcs(c: &[u8], r: &[u8]) -> usize {
    let is_subseq = |s: &[u8]| {
        let mut it = r.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << c.len()) {
        let sub: Vec<u8> = (0..c.len()).filter(|&i| mask & (1 << i) != 0).map(|i| c[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

fn naive_bm25(docs: &[Vec<String>], query: &[String]) -> Vec<f64> {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    docs.iter()
        .map(|doc| {
            let mut score = 0.0;
            for q in query {
                let tf = doc.iter().filter(|t| *t == q).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let df = docs.iter().filter(|d| d.contains(q)).count() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                score += idf * tf * (1.2 + 1.0) / (tf + 1.2 * (1.0 - 0.75 + 0.75 * doc.len() as f64 / avgdl));
            }
            score
        })
        .collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut rouge_bad = 0;
    for _ in 0..500 {
        let cl = rng.gen_range(0..12);
        let rl = rng.gen_range(0..12);
        let c: Vec<u8> = (0..cl).map(|_| rng.gen_range(0..5)).collect();
        let r: Vec<u8> = (0..rl).map(|_| rng.gen_range(0..5)).collect();
        let ok = rouge_n(&c, &r, 1) == oracle_rouge_n(&c, &r, 1)
            && rouge_n(&c, &r, 2) == oracle_rouge_n(&c, &r, 2)
            && lcs_len(&c, &r) == oracle_lcs(&c, &r)
            && rouge_l(&c, &r) == oracle_prf(oracle_lcs(&c, &r), c.len(), r.len());
        if !ok {
            rouge_bad += 1;
        }
    }
    let words = ["sort", "list", "java", "null", "array", "map", "file", "read", "error", "async", "loop", "type"];
    let mut bm25_bad = 0;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_docs = rng.gen_range(1..=50);
        let docs: Vec<Vec<String>> = (0..n_docs)
            .map(|_| (0..rng.gen_range(0..15)).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect())
            .collect();
        if docs.iter().all(Vec::is_empty) {
            continue;
        }
        let query: Vec<String> = (0..rng.gen_range(1..6)).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect();
        let index = Bm25Index::from_documents(docs.clone(), vec![String::new(); n_docs]).unwrap();
        let ranked = index.rank(&query, n_docs);
        let scores = naive_bm25(&docs, &query);
        let mut expected: Vec<usize> = (0..n_docs).collect();
        expected.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let order: Vec<usize> = ranked.iter().map(|r| r.0).collect();
        for &(d, s) in &ranked {
            worst = worst.max((s - scores[d]).abs());
        }
        if order != expected || ranked.iter().any(|&(d, s)| (s - scores[d]).abs() > 1e-9) {
            bm25_bad += 1;
        }
    }
    Outcome::new(
        rouge_bad == 0 && bm25_bad == 0,
        format!(
            "ROUGE: {rouge_bad}/500 pairs differ from brute force; BM25: {bm25_bad}/100 corpora differ, max score diff {worst:.1e}"
        ),
    )
}

const FIXTURE_TEXTS: [&str; 10] = [
    "How do I convert a List<String> to an int[] in Java 8?",
    "for (int i = 0; i < n; ++i) { sum += a[i] * b[i]; } // dot product\n\treturn sum;",
    "Warum wirft mein Code eine NullPointerException? Größe = 0, Ärger!",
    "如何在 Python 中读取 JSON 文件？ 使用 json.load(f) 吗",
    "const x = await fetch(`/api/${id}`).then(r => r.json()); // 🚀 fast?",
    "var q = from c in db.Customers where c.Age >= 18 select c; // LINQ <code> marker",
    "SELECT * FROM users WHERE name LIKE '%o''brien%';\r\n-- quotes & \"escapes\"",
    "def f(*args, **kwargs):\n    return {k: v for k, v in kwargs.items() if v is not None}",
    "Ça ne marche pas: l'élève a écrit «bonjour» — résultat ≠ attendu…",
    "regex: ^(?:[a-z0-9!#$%&'*+/=?^_`{|}~-]+)@\\w+\\.com$ matches? ¿Por qué no?",
];

fn tokenizer_roundtrip() -> Outcome {
    let vocab = SubwordVocabulary::train_up_to(&FIXTURE_TEXTS, 600).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let boundaries: Vec<Vec<usize>> = FIXTURE_TEXTS
        .iter()
        .map(|t| t.char_indices().map(|(i, _)| i).chain([t.len()]).collect())
        .collect();
    let mut failures = 0;
    let mut first = None;
    for _ in 0..10_000 {
        let mut s = String::new();
        for _ in 0..rng.gen_range(1..=3) {
            let k = rng.gen_range(0..FIXTURE_TEXTS.len());
            let b = &boundaries[k];
            let i = rng.gen_range(0..b.len());
            let j = rng.gen_range(i..b.len());
            s.push_str(&FIXTURE_TEXTS[k][b[i]..b[j]]);
        }
        let back = vocab.decode(&vocab.encode(&s)).unwrap();
        if back != s {
            failures += 1;
            first.get_or_insert(s);
        }
    }
    Outcome::new(
        failures == 0,
        format!("{failures} failures in 10000 strings, vocab {} pieces; first failure {first:?}", vocab.len()),
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;").replace('\n', "&#xA;")
}

struct FixturePost {
    id: u64,
    post_type: u32,
    score: i64,
    accepted: bool,
    tags: &'static str,
    title: &'static str,
    body: &'static str,
}

const FIXTURE_POSTS: [FixturePost; 12] = [
    FixturePost { id: 1, post_type: 1, score: 5, accepted: true, tags: "<java>", title: "Why does my loop skip the last element?", body: "<p>My loop stops one short.</p><pre><code>for (int i = 0; i &lt; n - 1; i++) {}\n</code></pre>" },
    FixturePost { id: 2, post_type: 1, score: 4, accepted: true, tags: "<java>", title: "Score four", body: "<p>Just below the bar.</p><pre><code>int x = 4;</code></pre>" },
    FixturePost { id: 3, post_type: 1, score: 5, accepted: false, tags: "<python>", title: "No accepted answer", body: "<p>Nobody answered well.</p><pre><code>print(1)</code></pre>" },
    FixturePost { id: 4, post_type: 1, score: 12, accepted: true, tags: "<python>", title: "Inline code only", body: "<p>Use <code>len(x)</code> here.</p>" },
    FixturePost { id: 5, post_type: 1, score: 6, accepted: true, tags: "<python><pandas>", title: "Merge two dicts & keep order", body: "<p>How do I merge <b>two</b> dicts?</p><pre><code>a = {1: 2}\nb = {3: 4}</code></pre><p>In Python 3.</p><pre><code>c = {**a, **b}</code></pre>" },
    FixturePost { id: 6, post_type: 1, score: 4, accepted: false, tags: "<c#>", title: "Fails everything", body: "<p>Nothing here.</p>" },
    FixturePost { id: 7, post_type: 1, score: 100, accepted: true, tags: "<c#><linq>", title: "LINQ GroupBy with count", body: "<p>Count per key?</p><pre><code>var g = xs.GroupBy(x =&gt; x.Key);</code></pre>" },
    FixturePost { id: 8, post_type: 1, score: 5, accepted: true, tags: "<javascript>", title: "Await in a forEach loop", body: "<p>Why doesn't this wait?</p><pre><code>items.forEach(async i =&gt; await f(i));</code></pre>" },
    FixturePost { id: 9, post_type: 1, score: 50, accepted: true, tags: "<rust>", title: "Other language", body: "<p>Borrow checker.</p><pre><code>let x = &amp;y;</code></pre>" },
    FixturePost { id: 10, post_type: 2, score: 80, accepted: false, tags: "<java>", title: "An answer", body: "<p>Answer text.</p><pre><code>x++;</code></pre>" },
    FixturePost { id: 11, post_type: 1, score: -1, accepted: true, tags: "<javascript>", title: "Negative score", body: "<p>Bad question.</p><pre><code>eval(s)</code></pre>" },
    FixturePost { id: 12, post_type: 1, score: 9, accepted: true, tags: "<java>", title: "Pre without code", body: "<p>Look:</p><pre>not code</pre>" },
];

fn corpus_filter_fixture() -> Outcome {
    let mut xml = String::from("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<posts>\n");
    for p in &FIXTURE_POSTS {
        let acc = if p.accepted { format!(" AcceptedAnswerId=\"{}\"", p.id + 100) } else { String::new() };
        xml.push_str(&format!(
            "  <row Id=\"{}\" PostTypeId=\"{}\" Score=\"{}\"{acc} Tags=\"{}\" Title=\"{}\" Body=\"{}\" />\n",
            p.id,
            p.post_type,
            p.score,
            xml_escape(p.tags),
            xml_escape(p.title),
            xml_escape(p.body)
        ));
    }
    xml.push_str("</posts>\n");
    let mined = match mine(xml.as_bytes(), &Language::ALL) {
        Ok(m) => m,
        Err(e) => return Outcome::new(false, format!("mining failed: {e}")),
    };
    let got: Vec<&PostTriplet> = mined.by_language.values().flatten().collect();
    let t = |id, language, description: &str, code: &str, title: &str| PostTriplet {
        post_id: id,
        language,
        description: description.into(),
        code: code.into(),
        title: title.into(),
    };
    let expected = [
        t(1, Language::Java, "My loop stops one short.", "for (int i = 0; i < n - 1; i++) {}", "Why does my loop skip the last element?"),
        t(7, Language::CSharp, "Count per key?", "var g = xs.GroupBy(x => x.Key);", "LINQ GroupBy with count"),
        t(5, Language::Python, "How do I merge two dicts? In Python 3.", "a = {1: 2}\nb = {3: 4}\nc = {**a, **b}", "Merge two dicts & keep order"),
        t(8, Language::JavaScript, "Why doesn't this wait?", "items.forEach(async i => await f(i));", "Await in a forEach loop"),
    ];
    let want: Vec<&PostTriplet> = expected.iter().collect();
    let kept: Vec<u64> = got.iter().map(|t| t.post_id).collect();
    let pass = got == want;
    let mut detail = format!("kept ids {kept:?} (expected [1, 7, 5, 8])");
    if !pass {
        for (g, w) in got.iter().zip(&want) {
            if g != w {
                detail.push_str(&format!("; got {g:?} want {w:?}"));
            }
        }
    }
    Outcome::new(pass, detail)
}

fn multi_task_loss_and_freeze() -> Outcome {
    let avg = multi_task_loss(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    let config = TrainingConfig {
        learning_rate: 1e-2,
        dropout: 0.1,
        freeze_norm_and_bias: true,
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        max_encoder_len: 16,
        max_decoder_len: 8,
        ..TrainingConfig::default()
    };
    let mut model = Seq2Seq::<f32>::new(config.model_config(64), 3).unwrap();
    // Start from non-trivial frozen values so an accidental update is visible.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        if model.params().get(id).kind().is_norm_or_bias() {
            for v in model.params_mut().value_mut(id).data_mut() {
                *v += rng.gen_range(-0.1f32..0.1);
            }
        }
    }
    let before = model.params().clone();
    let mut trainer = Trainer::new(&config);
    for _ in 0..100 {
        let batches = random_batches(&mut rng, 64, 3, 12, 6);
        trainer.step(&mut model, &batches).unwrap();
    }
    let (mut frozen, mut frozen_changed, mut trainable, mut trainable_changed) = (0, 0, 0, 0);
    for &id in &ids {
        let same = before.value(id).data().iter().zip(model.params().value(id).data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if before.get(id).kind().is_norm_or_bias() {
            frozen += 1;
            frozen_changed += usize::from(!same);
        } else {
            trainable += 1;
            trainable_changed += usize::from(!same);
        }
    }
    let pass = avg == 2.5 && frozen > 0 && frozen_changed == 0 && trainable_changed == trainable;
    Outcome::new(
        pass,
        format!(
            "mean of [1,2,3,4] = {avg}; after 100 steps {frozen_changed}/{frozen} frozen tensors changed, {trainable_changed}/{trainable} trainable tensors changed"
        ),
    )
}

fn modality_ordering() -> Outcome {
    let Ok(dump) = std::env::var("TITLE_FORGE_RQ2_DUMP") else {
        return Outcome::new(false, "not evaluated: set TITLE_FORGE_RQ2_DUMP to a Posts.xml dump to run it");
    };
    let per_lang: usize = std::env::var("TITLE_FORGE_RQ2_POSTS").ok().and_then(|v| v.parse().ok()).unwrap_or(2000);
    let budget = Duration::from_secs(2 * 3600);
    let start = Instant::now();
    let file = match File::open(&dump) {
        Ok(f) => f,
        Err(e) => return Outcome::new(false, format!("{dump}: {e}")),
    };
    let mined = match mine(BufReader::new(file), &Language::ALL) {
        Ok(m) => m,
        Err(e) => return Outcome::new(false, format!("mining failed: {e}")),
    };
    let test_n = per_lang / 10;
    let train_n = per_lang - 2 * test_n;
    let mut splits = BTreeMap::new();
    for (lang, mut posts) in mined.by_language {
        let mut rng = ChaCha8Rng::seed_from_u64(lang.index() as u64);
        posts.shuffle(&mut rng);
        posts.truncate(per_lang);
        match split_corpus(posts, 42, train_n, test_n) {
            Ok(s) => {
                splits.insert(lang, s);
            }
            Err(e) => return Outcome::new(false, format!("{lang}: {e}")),
        }
    }
    let train_all: Vec<PostTriplet> = splits.values().flat_map(|s| s.train.iter().cloned()).collect();
    let test_all: Vec<PostTriplet> = splits.values().flat_map(|s| s.test.iter().cloned()).collect();
    let vocab = SubwordVocabulary::train_up_to(&texts_of(&train_all), 4000).unwrap();
    let mut scores = HashMap::new();
    for mode in [InputMode::Both, InputMode::DescOnly, InputMode::CodeOnly] {
        let config = TrainingConfig {
            input_mode: mode,
            max_epochs: 10,
            ..TrainingConfig::default()
        };
        let mut train = TaskSets::default();
        let mut valid = TaskSets::default();
        for (&lang, s) in &splits {
            *train.get_mut(lang) = prepare_examples(&vocab, &s.train, mode, config.max_encoder_len);
            *valid.get_mut(lang) = prepare_examples(&vocab, &s.validation, mode, config.max_encoder_len);
        }
        let mut model = Seq2Seq::<f32>::new(config.model_config(vocab.len()), config.seed).unwrap();
        if let Err(e) = fit(&mut model, &train, &valid, &config, |_| {}) {
            return Outcome::new(false, format!("training {} failed: {e}", mode.as_str()));
        }
        let generator = ModelGenerator { model: &model, vocab: &vocab, beam: BeamConfig::default() };
        let report = evaluate(&generator, &test_all, mode).unwrap();
        let mean = report.records.iter().map(|r| r.rouge_l.f1).sum::<f64>() / report.records.len() as f64;
        scores.insert(mode.as_str(), mean);
        if start.elapsed() > budget {
            return Outcome::new(false, format!("over the 2 h budget after {}", mode.as_str()));
        }
    }
    let (b, d, c) = (scores["both"], scores["desc_only"], scores["code_only"]);
    Outcome::new(
        b >= d && d >= c,
        format!("Rouge-L both {b:.3}, desc_only {d:.3}, code_only {c:.3} on {per_lang} posts/language"),
    )
}
