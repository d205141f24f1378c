//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers (run with `--nocapture` to see them).
//!
//! Tests share a lock so wall-clock measurements never contend for CPU.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use starembed::aggregate::{balance, cosine_softmax_weights, grid_search_alpha, weighted_pool, BalanceSpec};
use starembed::cli::{self, Method, Overrides, RunConfig, RunConfigFile};
use starembed::corpus::load_corpus;
use starembed::encoder::{
    build_context_cache, encode_individual, encode_par, encode_seq, encode_with_plan, par_forward,
    CacheStore, EncodePlan, KVCacheEntry, SeqOptions, Strategy,
};
use starembed::eval::{mrr, ndcg_at_k, v_measure};
use starembed::model::{cosine, cosine_distance, forward, pool_last, EmbedKind, ModelConfig, Weights};
use starembed::oracle::{dense_oracle, BlockMask, OracleBlock};
use starembed::tokenizer::tokenize;

fn lock() -> MutexGuard<'static, ()> {
    static GATE: OnceLock<Mutex<()>> = OnceLock::new();
    GATE.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn small_weights(seed: u64) -> Weights {
    Weights::init(&ModelConfig::small(seed)).unwrap()
}

fn random_text(rng: &mut ChaCha8Rng, max_tokens: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";
    let bytes = rng.random_range(0..max_tokens); // text of b bytes = b+1 tokens
    (0..bytes)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

// -----------------------------------------------------------------------
// 1. Dense-oracle equivalence: the sparse cached-KV computation matches a
//    dense block-masked attention pass, 50 random cases.
// -----------------------------------------------------------------------
#[test]
fn criterion_01_dense_oracle_equivalence() {
    let _guard = lock();
    let start = Instant::now();
    let weights = small_weights(4242);
    let l_ctx = 32usize;
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f32;

    for case in 0..50 {
        let n_ctx = [1usize, 2, 4][case % 3];
        let contexts: Vec<String> = (0..n_ctx).map(|_| random_text(&mut rng, 31)).collect();
        let target = random_text(&mut rng, 31);

        let entries: Vec<KVCacheEntry> = contexts
            .iter()
            .enumerate()
            .map(|(i, text)| build_context_cache(&weights, &format!("c{i}"), text, l_ctx).unwrap())
            .collect();
        let entry_refs: Vec<&KVCacheEntry> = entries.iter().collect();
        let target_tokens = tokenize(&target);
        let (sparse, _) = par_forward(&weights, &entry_refs, l_ctx, &target_tokens).unwrap();

        let mut blocks: Vec<OracleBlock> = contexts
            .iter()
            .map(|text| OracleBlock::at_offset(tokenize(text), 0))
            .collect();
        blocks.push(OracleBlock::at_offset(target_tokens.clone(), l_ctx as u32));
        let dense = dense_oracle(&weights, &blocks, &BlockMask::parallel_contexts(n_ctx)).unwrap();

        let ctx_tokens: usize = contexts.iter().map(|t| tokenize(t).len()).sum();
        for row in 0..target_tokens.len() {
            let diff = max_abs_diff(sparse.row(row), dense.row(ctx_tokens + row));
            worst = worst.max(diff);
            assert!(
                diff <= 1e-5,
                "case {case} (n={n_ctx}) row {row}: diff {diff}"
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}, budget 30s");
    println!(
        "PASS criterion 1: dense-oracle equivalence, 50 cases, max |diff| {worst:.2e} (<= 1e-5), {:.1}s",
        elapsed.as_secs_f64()
    );
}

// -----------------------------------------------------------------------
// 2. Single-context collapse: one cache makes the sparse mask equal the
//    causal mask over the gapped sequence.
// -----------------------------------------------------------------------
#[test]
fn criterion_02_single_context_collapse() {
    let _guard = lock();
    let start = Instant::now();
    let weights = small_weights(777);
    let l_ctx = 32usize;
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut worst = 0.0f64;

    for case in 0..20 {
        let ctx = random_text(&mut rng, 31);
        let target = random_text(&mut rng, 31);
        let store = CacheStore::build(&weights, &[("v", ctx.as_str())], l_ctx, 1).unwrap();
        let par = encode_par(&weights, &store, &["v".to_string()], &target).unwrap();

        // seq route, no separator, target block gapped to start at l_ctx
        let ctx_tokens = tokenize(&ctx);
        let tgt_tokens = tokenize(&target);
        let mut stream = ctx_tokens.clone();
        stream.extend(tgt_tokens.iter().copied());
        let mut positions: Vec<u32> = (0..ctx_tokens.len() as u32).collect();
        positions.extend((0..tgt_tokens.len() as u32).map(|i| i + l_ctx as u32));
        let (hidden, _) = forward(&weights, &stream, &positions, None).unwrap();
        let gapped_seq = pool_last(&hidden, EmbedKind::Seq).unwrap();

        let dist = cosine_distance(&par.vector, &gapped_seq.vector);
        worst = worst.max(dist);
        assert!(dist <= 1e-5, "case {case}: cosine distance {dist}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}, budget 10s");
    println!(
        "PASS criterion 2: single-context collapse, 20 cases, max cosine distance {worst:.2e} (<= 1e-5), {:.1}s",
        elapsed.as_secs_f64()
    );
}

// -----------------------------------------------------------------------
// 3. Order invariance vs sensitivity over 10 permutations of 4 contexts.
// -----------------------------------------------------------------------
#[test]
fn criterion_03_order_invariance_vs_sensitivity() {
    let _guard = lock();
    let start = Instant::now();
    let weights = small_weights(42);
    let l_ctx = 48usize;
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let contexts: Vec<(String, String)> = (0..4)
        .map(|i| (format!("c{i}"), random_text(&mut rng, 40)))
        .collect();
    let refs: Vec<(&str, &str)> = contexts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let target = "the segment under study";
    let store = CacheStore::build(&weights, &refs, l_ctx, 1).unwrap();
    let instruction = starembed::instructions::preset("musique").unwrap();

    let mut perms: Vec<Vec<usize>> = Vec::new();
    for _ in 0..10 {
        let mut p: Vec<usize> = (0..4).collect();
        for i in (1..4).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        perms.push(p);
    }

    let mut embeddings: BTreeMap<&str, Vec<Vec<f32>>> = BTreeMap::new();
    for p in &perms {
        let related: Vec<String> = p.iter().map(|&i| contexts[i].0.clone()).collect();
        let texts: Vec<&str> = p.iter().map(|&i| contexts[i].1.as_str()).collect();
        embeddings.entry("seq").or_default().push(
            encode_seq(&weights, &texts, target, &SeqOptions::new(8192))
                .unwrap()
                .vector,
        );
        embeddings.entry("par").or_default().push(
            encode_par(&weights, &store, &related, target).unwrap().vector,
        );
        embeddings.entry("par-distill").or_default().push(
            starembed::encoder::encode_par_distill(&weights, &store, &related, instruction, target)
                .unwrap()
                .vector,
        );
    }

    let max_pairwise = |vs: &[Vec<f32>]| -> f64 {
        let mut max = 0.0f64;
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                max = max.max(cosine_distance(&vs[i], &vs[j]));
            }
        }
        max
    };
    let par_dist = max_pairwise(&embeddings["par"]);
    let distill_dist = max_pairwise(&embeddings["par-distill"]);
    let seq_dist = max_pairwise(&embeddings["seq"]);
    assert!(par_dist <= 1e-5, "par distance {par_dist}");
    assert!(distill_dist <= 1e-5, "par-distill distance {distill_dist}");
    assert!(seq_dist >= 1e-4, "seq distance {seq_dist} should exceed 1e-4");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 20, "took {elapsed:?}, budget 20s");
    println!(
        "PASS criterion 3: order study, par {par_dist:.2e} / par-distill {distill_dist:.2e} (<= 1e-5), seq {seq_dist:.2e} (>= 1e-4), {:.1}s",
        elapsed.as_secs_f64()
    );
}

// -----------------------------------------------------------------------
// 4. Empty-context reduction for all four strategies.
// -----------------------------------------------------------------------
#[test]
fn criterion_04_empty_context_reduction() {
    let _guard = lock();
    let start = Instant::now();
    let weights = small_weights(4004);
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("corpus.jsonl");
    let mut lines = String::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    for i in 0..10 {
        lines.push_str(&format!(
            "{{\"id\": \"s{i}\", \"text\": \"{} {}\"}}\n",
            i,
            random_text(&mut rng, 30)
        ));
    }
    std::fs::write(&corpus_path, lines).unwrap();
    let corpus = load_corpus(&corpus_path).unwrap().corpus;

    let mut worst = 0.0f64;
    for segment in corpus.segments() {
        let individual = encode_individual(&weights, &segment.text).unwrap();
        for strategy in [Strategy::Individual, Strategy::Seq, Strategy::Par, Strategy::ParDistill] {
            let mut plan = EncodePlan::new(strategy, &segment.id, vec![]);
            plan.l_ctx = 48;
            if strategy == Strategy::ParDistill {
                plan.instruction = Some("summarize the context".into());
            }
            let emb = encode_with_plan(&weights, &corpus, None, &plan).unwrap();
            let dist = cosine_distance(&emb.vector, &individual.vector);
            worst = worst.max(dist);
            assert!(
                dist <= 1e-5,
                "{} on {}: cosine distance {dist}",
                strategy,
                segment.id
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 5, "took {elapsed:?}, budget 5s");
    println!(
        "PASS criterion 4: empty-context reduction, 10 segments x 4 strategies, max cosine distance {worst:.2e} (<= 1e-5), {:.1}s",
        elapsed.as_secs_f64()
    );
}

// -----------------------------------------------------------------------
// 5. PE budget: the target block's positions never drift with cache count.
// -----------------------------------------------------------------------
#[test]
fn criterion_05_pe_budget() {
    let _guard = lock();
    let weights = small_weights(5005);
    let l_ctx = 32usize;
    let target = "a fixed target segment";
    let t_target = tokenize(target).len();
    let instruction_tokens = tokenize("summarize the above");

    for n in [1usize, 4, 16] {
        let segments: Vec<(String, String)> = (0..n)
            .map(|i| (format!("c{i:02}"), format!("context body {i}")))
            .collect();
        let refs: Vec<(&str, &str)> = segments.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let store = CacheStore::build(&weights, &refs, l_ctx, 1).unwrap();
        let entries: Vec<&KVCacheEntry> = refs.iter().map(|(id, _)| store.get(id).unwrap()).collect();

        let (_, kv) = par_forward(&weights, &entries, l_ctx, &tokenize(target)).unwrap();
        assert_eq!(
            kv.max_position().unwrap() as usize,
            l_ctx + t_target - 1,
            "par with {n} caches"
        );

        // the distilled stage extends the budget by exactly the instruction
        let (_, kv_ins) = par_forward(&weights, &entries, l_ctx, &instruction_tokens).unwrap();
        assert_eq!(
            kv_ins.max_position().unwrap() as usize,
            l_ctx + instruction_tokens.len() - 1,
            "instruction stage with {n} caches"
        );
    }
    println!(
        "PASS criterion 5: PE budget, max position id = l_ctx + t_target - 1 = {} for caches in {{1, 4, 16}} (exact)",
        l_ctx + t_target - 1
    );
}

// -----------------------------------------------------------------------
// 6. Complexity shape: with caches prebuilt, par target-encode time barely
//    grows with n while seq grows superlinearly.
// -----------------------------------------------------------------------
#[test]
fn criterion_06_complexity_shape() {
    let _guard = lock();
    let start = Instant::now();
    let mut config = ModelConfig::new(2, 4, 128, 6006);
    config.max_pos = 2048;
    let weights = Weights::init(&config).unwrap();
    let l = 48usize;
    let mut rng = ChaCha8Rng::seed_from_u64(6006);

    let contexts: Vec<(String, String)> = (0..16)
        .map(|i| {
            let mut text = random_text(&mut rng, l);
            while text.len() < l - 1 {
                text.push('x');
            }
            (format!("c{i:02}"), text)
        })
        .collect();
    let refs: Vec<(&str, &str)> = contexts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let mut target = random_text(&mut rng, l);
    while target.len() < l - 1 {
        target.push('y');
    }
    let store = CacheStore::build(&weights, &refs, l, 1).unwrap();
    let related_of = |n: usize| -> Vec<String> { refs[..n].iter().map(|(id, _)| id.to_string()).collect() };
    let texts_of = |n: usize| -> Vec<&str> { refs[..n].iter().map(|(_, t)| *t).collect() };
    let opts = SeqOptions::new(config.max_pos);

    let median_secs = |f: &mut dyn FnMut()| -> f64 {
        f(); // warmup
        let mut samples: Vec<f64> = (0..5)
            .map(|_| {
                let t0 = Instant::now();
                f();
                t0.elapsed().as_secs_f64()
            })
            .collect();
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        samples[2]
    };

    let par_1 = median_secs(&mut || {
        encode_par(&weights, &store, &related_of(1), &target).unwrap();
    });
    let par_16 = median_secs(&mut || {
        encode_par(&weights, &store, &related_of(16), &target).unwrap();
    });
    let seq_1 = median_secs(&mut || {
        encode_seq(&weights, &texts_of(1), &target, &opts).unwrap();
    });
    let seq_16 = median_secs(&mut || {
        encode_seq(&weights, &texts_of(16), &target, &opts).unwrap();
    });

    let par_ratio = par_16 / par_1;
    let seq_ratio = seq_16 / seq_1;
    assert!(
        par_ratio <= 2.5,
        "par n=16/n=1 ratio {par_ratio:.2} exceeds 2.5 ({par_1:.4}s -> {par_16:.4}s)"
    );
    assert!(
        seq_ratio >= 4.0,
        "seq n=16/n=1 ratio {seq_ratio:.2} below 4 ({seq_1:.4}s -> {seq_16:.4}s)"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2min");
    println!(
        "PASS criterion 6: complexity shape, par x{par_ratio:.2} (<= 2.5), seq x{seq_ratio:.2} (>= 4), {:.1}s",
        elapsed.as_secs_f64()
    );
}

// -----------------------------------------------------------------------
// 7. Aggregation and balancing oracles.
// -----------------------------------------------------------------------
#[test]
fn criterion_07_aggregation_and_balancing() {
    let _guard = lock();

    // singleton weighted pool is the identity, bitwise
    let lone = starembed::model::Embedding::unit(vec![0.3, -0.7, 0.2], EmbedKind::Individual)
        .unwrap()
        .vector;
    let target = starembed::model::Embedding::unit(vec![1.0, 0.2, 0.0], EmbedKind::Individual)
        .unwrap()
        .vector;
    let pooled = weighted_pool(&target, &[("only", &lone)]).unwrap();
    assert_eq!(pooled.vector, lone, "singleton weighted pool must be exact");

    // softmax weights for cosines {1, 0}
    let t = vec![1.0f32, 0.0];
    let same = vec![1.0f32, 0.0];
    let orth = vec![0.0f32, 1.0];
    let w = cosine_softmax_weights(&t, &[("a", &same), ("b", &orth)]).unwrap();
    assert!((w[0] - 0.7311).abs() <= 1e-4, "w0 = {}", w[0]);
    assert!((w[1] - 0.2689).abs() <= 1e-4, "w1 = {}", w[1]);

    // balance endpoints are exact
    let ind = starembed::model::Embedding::unit(vec![0.6, 0.8], EmbedKind::Individual)
        .unwrap()
        .vector;
    let st = starembed::model::Embedding::unit(vec![-0.8, 0.6], EmbedKind::Individual)
        .unwrap()
        .vector;
    assert_eq!(balance(&ind, &st, &BalanceSpec::new(0.0).unwrap()).unwrap(), ind);
    assert_eq!(balance(&ind, &st, &BalanceSpec::new(1.0).unwrap()).unwrap(), st);

    // the planted alpha fixture: flips at 0.25/0.31/0.61 make hit@1 peak on
    // the plateau {0.26, 0.28, 0.30}; ties resolve to the smaller alpha
    let (alpha, score) = grid_search_alpha(planted_retrieval_score, 0.02).unwrap();
    assert_eq!(alpha, 0.26, "grid search must recover the planted alpha");
    assert_eq!(score, 1.0);

    println!(
        "PASS criterion 7: aggregation + balancing, weights ({:.4}, {:.4}), endpoints exact, alpha* = {alpha}",
        w[0], w[1]
    );
}

struct PlantedQuery {
    query: Vec<f32>,
    u_rel: Vec<f32>,
    s_rel: Vec<f32>,
    w_dis: Vec<f32>,
}

/// Planted 4-query retrieval score; vectors frozen from the construction
/// oracle that verified the full 51-point grid exhaustively.
fn planted_retrieval_score(alpha: f64) -> f64 {
    let queries = vec![
        PlantedQuery {
            query: vec![1.0, 0.0],
            u_rel: vec![0.173_648_18, 0.984_807_73],
            s_rel: vec![0.984_807_73, 0.173_648_18],
            w_dis: vec![0.433_732_33, 0.901_041_75],
        },
        PlantedQuery {
            query: vec![1.0, 0.0],
            u_rel: vec![0.984_807_73, 0.173_648_18],
            s_rel: vec![0.173_648_18, 0.984_807_73],
            w_dis: vec![0.865_151_17, 0.501_511_22],
        },
        PlantedQuery {
            query: vec![1.0, 0.0],
            u_rel: vec![0.978_147_63, 0.207_911_69],
            s_rel: vec![0.258_819_04, 0.965_925_81],
            w_dis: vec![0.626_901_63, 0.779_098_45],
        },
        PlantedQuery {
            query: vec![1.0, 0.0],
            u_rel: vec![0.996_194_72, 0.087_155_74],
            s_rel: vec![0.996_194_72, 0.087_155_74],
            w_dis: vec![0.766_044_44, 0.642_787_64],
        },
    ];
    let spec = BalanceSpec::new(alpha).unwrap();
    let mut hits = 0usize;
    for q in &queries {
        let rel = balance(&q.u_rel, &q.s_rel, &spec).unwrap();
        let dis = balance(&q.w_dis, &q.w_dis, &spec).unwrap();
        if cosine(&rel, &q.query) >= cosine(&dis, &q.query) {
            hits += 1;
        }
    }
    hits as f64 / 4.0
}

// -----------------------------------------------------------------------
// 8. Metric oracles.
// -----------------------------------------------------------------------
#[test]
fn criterion_08_metric_oracles() {
    let _guard = lock();
    let ranking: Vec<String> = ["x", "y", "rel", "z"].iter().map(|s| s.to_string()).collect();
    let relevant: std::collections::BTreeSet<String> = std::iter::once("rel".to_string()).collect();
    assert_eq!(ndcg_at_k(&ranking, &relevant, 10), 0.5);

    let ranking: Vec<String> = ["b", "a", "c"].iter().map(|s| s.to_string()).collect();
    let relevant: std::collections::BTreeSet<String> = std::iter::once("a".to_string()).collect();
    assert_eq!(mrr(&ranking, &relevant), 0.5);

    let labels = ["a", "a", "b", "b"];
    assert_eq!(v_measure(&labels, &[1, 1, 0, 0], 1.0), 1.0);
    assert_eq!(v_measure(&labels, &[0, 0, 0, 0], 1.0), 0.0);

    // frozen from the contingency-entropy oracle
    let v = v_measure(&labels, &[0, 0, 1, 0], 1.0);
    assert!(
        (v - 0.343711018485451).abs() <= 1e-9,
        "v_measure {v} vs oracle 0.343711018485451"
    );

    println!("PASS criterion 8: metric oracles, ndcg 0.5 / mrr 0.5 / v-measure 1.0, 0.0, {v:.12}");
}

// -----------------------------------------------------------------------
// 9. End-to-end fixtures: byte-identical reports across runs and worker
//    counts, equal to the committed oracle outputs.
// -----------------------------------------------------------------------
#[test]
fn criterion_09_end_to_end_fixtures() {
    let _guard = lock();
    let start = Instant::now();
    for fixture in ["tiny_wiki", "tiny_shop", "tiny_posts"] {
        let fx = fixtures_dir().join(fixture);
        let tmp = tempfile::tempdir().unwrap();

        let embed_cfg = |workers: usize, out: &Path| -> RunConfig {
            let file = RunConfigFile::load(&fx.join("config.toml")).unwrap();
            let ov = Overrides {
                corpus: Some(fx.join("corpus.jsonl")),
                output: Some(out.to_path_buf()),
                workers: Some(workers),
                ..Default::default()
            };
            RunConfig::resolve(file, ov).unwrap()
        };

        let emb_a = tmp.path().join("a.emb.jsonl");
        let emb_b = tmp.path().join("b.emb.jsonl");
        let emb_w4 = tmp.path().join("w4.emb.jsonl");
        cli::cmd_embed(&embed_cfg(1, &emb_a)).unwrap();
        cli::cmd_embed(&embed_cfg(1, &emb_b)).unwrap();
        cli::cmd_embed(&embed_cfg(4, &emb_w4)).unwrap();
        let bytes_a = std::fs::read(&emb_a).unwrap();
        assert_eq!(bytes_a, std::fs::read(&emb_b).unwrap(), "{fixture}: two runs differ");
        assert_eq!(bytes_a, std::fs::read(&emb_w4).unwrap(), "{fixture}: worker counts differ");

        let eval_cfg = |emb: &Path, out: &Path| -> RunConfig {
            let file = RunConfigFile::load(&fx.join("config.toml")).unwrap();
            let ov = Overrides {
                task: Some(fx.join("task.jsonl")),
                embeddings: Some(emb.to_path_buf()),
                output: Some(out.to_path_buf()),
                ..Default::default()
            };
            RunConfig::resolve(file, ov).unwrap()
        };
        let rep_a = tmp.path().join("a.report.json");
        let rep_w4 = tmp.path().join("w4.report.json");
        cli::cmd_eval(&eval_cfg(&emb_a, &rep_a)).unwrap();
        cli::cmd_eval(&eval_cfg(&emb_w4, &rep_w4)).unwrap();
        let report = std::fs::read(&rep_a).unwrap();
        assert_eq!(report, std::fs::read(&rep_w4).unwrap(), "{fixture}: reports differ");

        let golden = std::fs::read(fx.join("expected_report.json")).unwrap();
        assert_eq!(
            report, golden,
            "{fixture}: report does not match the committed oracle output"
        );
    }
    println!(
        "PASS criterion 9: end-to-end fixtures byte-identical across runs and workers {{1, 4}}, matching committed oracles, {:.1}s",
        start.elapsed().as_secs_f64()
    );
}

// -----------------------------------------------------------------------
// 10. Directional finding: the seq-minus-par gap never grows as segments
//     lengthen under a fixed context window.
// -----------------------------------------------------------------------
#[test]
fn criterion_10_length_scaling_trend() {
    let _guard = lock();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench_length.csv");
    let ov = Overrides {
        seed: Some(42),
        max_pos: Some(1024),
        l_ctx: Some(512),
        metrics: Some(vec!["ndcg@10".to_string()]),
        output: Some(out.clone()),
        ..Default::default()
    };
    let cfg = RunConfig::resolve(RunConfigFile::default(), ov).unwrap();
    assert_eq!(cfg.method, Method::Strategy(Strategy::Individual)); // bench drives strategies itself
    cli::cmd_bench_length(&cfg, &[64, 128, 256, 512]).unwrap();

    let csv = std::fs::read_to_string(&out).unwrap();
    let gaps = cli::seq_par_gaps_from_csv(&csv).unwrap();
    assert_eq!(gaps.len(), 4);
    for pair in gaps.windows(2) {
        let (len_a, gap_a) = pair[0];
        let (len_b, gap_b) = pair[1];
        assert!(
            gap_b <= gap_a,
            "gap grew from {gap_a:.4} (len {len_a}) to {gap_b:.4} (len {len_b})"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}, budget 5min");
    let gap_list: Vec<String> = gaps.iter().map(|(l, g)| format!("{l}:{g:+.4}")).collect();
    println!(
        "PASS criterion 10: seq-par gap non-increasing over lengths [{}], {:.1}s",
        gap_list.join(", "),
        elapsed.as_secs_f64()
    );
}
