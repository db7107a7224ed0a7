use std::collections::BTreeMap;
use std::path::PathBuf;

use approx::assert_abs_diff_eq;
use medeir::model::EncoderModel;
use medeir::numerics::{Precision, Tensor};
use medeir::tokenizer::{train_wordpiece, EncodedSequence, TokenizerModel};
use medeir::training::{
    accumulate, adamw_step, build_model, cached_contrastive_gradients, hard_negative_loss, lr_at, run_stage,
    select_whole_word_mask, train_to_dir, ArchConfig, ContrastiveOptions, OptimizerState, PairExample, Stage,
    StageConfig, StageData, TRAIN_LOG_FILE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn docs() -> Vec<String> {
    std::fs::read_to_string(fixture("medical_abstracts.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["text"].as_str().unwrap().to_string())
        .collect()
}

fn tokenizer() -> TokenizerModel {
    TokenizerModel::new(train_wordpiece(&docs(), 400, 2).unwrap()).unwrap()
}

fn chunks(tok: &TokenizerModel, len: usize) -> Vec<Vec<u32>> {
    docs().iter().map(|d| tok.encode(d).ids.into_iter().take(len).collect()).collect()
}

fn tiny(stage: Stage, precision: Precision) -> StageConfig {
    let mut cfg = StageConfig::defaults(stage);
    cfg.arch = ArchConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        ffn_dim: 32,
        num_projections: 2,
        precision,
    };
    cfg.global_batch = 4;
    cfg.grad_accum = 1;
    cfg.max_len = 48;
    cfg.schedule.total_steps = 3;
    cfg.seed = 11;
    cfg
}

#[test]
fn first_mlm_loss_is_near_uniform() {
    let tok = tokenizer();
    let data = chunks(&tok, 48);
    let mut cfg = tiny(Stage::Mlm, Precision::F32);
    cfg.schedule.total_steps = 1;
    cfg.global_batch = 8;
    let mut model = build_model(&cfg, &tok, Some(&data)).unwrap();
    let report = run_stage(&cfg, &mut model, &tok, StageData::Chunks(&data)).unwrap();
    let ln_v = (tok.vocab.len() as f64).ln();
    let first = report.records[0].loss;
    assert!((first - ln_v).abs() / ln_v < 0.05, "first loss {first}, ln V {ln_v}");
}

#[test]
fn grad_accum_does_not_change_the_update() {
    let tok = tokenizer();
    let data = chunks(&tok, 32);
    let run = |accum| {
        let mut cfg = tiny(Stage::Mlm, Precision::F64);
        cfg.grad_accum = accum;
        let mut model = build_model(&cfg, &tok, Some(&data)).unwrap();
        run_stage(&cfg, &mut model, &tok, StageData::Chunks(&data)).unwrap();
        model
    };
    let (a, b) = (run(1), run(2));
    for (name, p) in a.params() {
        let q = &b.params()[name];
        let diff = p.data().iter().zip(q.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{name}: {diff}");
    }
}

/// Two half-batches accumulated with weight 1/2 against one tape holding the
/// mean loss of the whole batch.
#[test]
fn accumulated_halves_match_full_batch_step() {
    let tok = tokenizer();
    let data = chunks(&tok, 24);
    let cfg = tiny(Stage::Mlm, Precision::F64);
    let model = build_model(&cfg, &tok, Some(&data)).unwrap();
    let jobs: Vec<(Vec<u32>, Vec<usize>, Vec<u32>)> = data[..4]
        .iter()
        .map(|ids| {
            let positions: Vec<usize> = (1..ids.len()).step_by(3).collect();
            let targets = positions.iter().map(|&p| ids[p]).collect();
            let mut corrupted = ids.clone();
            for &p in &positions {
                corrupted[p] = tok.vocab.id("[MASK]").unwrap();
            }
            (corrupted, positions, targets)
        })
        .collect();
    let grads_of = |part: &[(Vec<u32>, Vec<usize>, Vec<u32>)]| {
        let tape = model.tape();
        let b = model.bind(&tape, true);
        let mut total = None;
        for (ids, pos, tgt) in part {
            let l = model.mlm_loss(&b, ids, &vec![1; ids.len()], pos, tgt).unwrap();
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l).unwrap(),
            });
        }
        let mean = tape.scale(total.unwrap(), 1.0 / part.len() as f64);
        tape.backward(mean).unwrap();
        b.gradients()
    };
    let full = grads_of(&jobs);
    let mut acc = BTreeMap::new();
    accumulate(&mut acc, grads_of(&jobs[..2]), 0.5);
    accumulate(&mut acc, grads_of(&jobs[2..]), 0.5);

    let lr = lr_at(&cfg.schedule, cfg.optimizer.lr, 1).unwrap();
    let step = |grads: &BTreeMap<String, Tensor>| {
        let mut params = model.params().clone();
        let mut state = OptimizerState::new(cfg.optimizer);
        adamw_step(&mut params, grads, &mut state, lr, Precision::F64).unwrap();
        params
    };
    let (a, b) = (step(&full), step(&acc));
    for (name, p) in &a {
        let diff = p.data().iter().zip(b[name].data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{name}: {diff}");
    }
}

#[test]
fn cached_gradients_equal_single_tape_gradients() {
    let tok = tokenizer();
    let cfg = tiny(Stage::HardNegative, Precision::F64);
    let model = build_model(&cfg, &tok, None).unwrap();
    let texts = [
        "insulin resistance in adults",
        "metformin lowers glucose",
        "statin therapy and cholesterol",
        "glucose control with metformin",
        "hypertension treatment outcomes",
        "cholesterol and statins",
        "asthma inhaler adherence",
        "kidney function decline",
        "influenza vaccination coverage",
    ];
    let seqs: Vec<EncodedSequence> = texts.iter().map(|t| tok.encode(t)).collect();
    let refs: Vec<&EncodedSequence> = seqs.iter().collect();
    let (b, h) = (3, 1);
    let opts = ContrastiveOptions {
        symmetric: true,
        ..ContrastiveOptions::new(0.05)
    };
    let (loss, cached) = cached_contrastive_gradients(&model, &refs, b, h, opts).unwrap();

    let tape = model.tape();
    let bound = model.bind(&tape, true);
    let rows: Vec<_> = seqs
        .iter()
        .map(|s| {
            let e = model.embed_var(&bound, &s.ids, &s.attention_mask).unwrap();
            tape.reshape(e, &[1, cfg.arch.hidden]).unwrap()
        })
        .collect();
    let q = tape.concat(&rows[..b], 0).unwrap();
    let p = tape.concat(&rows[b..2 * b], 0).unwrap();
    let n = tape.concat(&rows[2 * b..], 0).unwrap();
    let n = tape.reshape(n, &[b, h, cfg.arch.hidden]).unwrap();
    let direct = hard_negative_loss(&tape, q, p, Some(n), opts).unwrap();
    assert_abs_diff_eq!(tape.value(direct).item().unwrap(), loss, epsilon = 1e-12);
    tape.backward(direct).unwrap();
    let reference = bound.gradients();

    assert_eq!(reference.keys().collect::<Vec<_>>(), cached.keys().collect::<Vec<_>>());
    for (name, g) in &reference {
        let scale = g.data().iter().fold(1e-8, |m: f64, v| m.max(v.abs()));
        let diff = g.data().iter().zip(cached[name].data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff / scale < 1e-9, "{name}: {diff} of {scale}");
    }
}

#[test]
fn identical_texts_start_at_ln_batch() {
    let tok = tokenizer();
    let mut cfg = tiny(Stage::Contrastive, Precision::F32);
    cfg.global_batch = 8;
    cfg.schedule.total_steps = 1;
    let pairs: Vec<PairExample> = (0..8)
        .map(|_| PairExample {
            query: "metformin and insulin".into(),
            positive: "metformin and insulin".into(),
            negatives: Vec::new(),
            source_id: "default".into(),
        })
        .collect();
    let mut model = build_model(&cfg, &tok, None).unwrap();
    let report = run_stage(&cfg, &mut model, &tok, StageData::Pairs(&pairs)).unwrap();
    assert_abs_diff_eq!(report.records[0].loss, 8f64.ln(), epsilon = 1e-5);
}

#[test]
fn wrong_data_kind_is_rejected() {
    let tok = tokenizer();
    let data = chunks(&tok, 16);
    let cfg = tiny(Stage::Contrastive, Precision::F32);
    let mut model = build_model(&cfg, &tok, None).unwrap();
    assert!(run_stage(&cfg, &mut model, &tok, StageData::Chunks(&data)).is_err());
    let cfg = tiny(Stage::Mlm, Precision::F32);
    assert!(run_stage(&cfg, &mut model, &tok, StageData::Pairs(&[])).is_err());
}

#[test]
fn same_seed_same_checkpoint() {
    let tok = tokenizer();
    let data = chunks(&tok, 32);
    let cfg = tiny(Stage::Mlm, Precision::F32);
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut model = build_model(&cfg, &tok, Some(&data)).unwrap();
        let out = dir.path().join(name);
        let log = dir.path().join(format!("{name}.jsonl"));
        train_to_dir(&cfg, &mut model, &tok, StageData::Chunks(&data), &out, Some(&log)).unwrap();
        let inside = std::fs::read_to_string(out.join(TRAIN_LOG_FILE)).unwrap();
        assert_eq!(inside, std::fs::read_to_string(&log).unwrap());
        assert_eq!(inside.lines().count(), cfg.schedule.total_steps);
        let (loaded, _) = EncoderModel::load(&out).unwrap();
        (model.fingerprint(), loaded.fingerprint(), inside)
    };
    let (a, a_loaded, log_a) = run("a");
    let (b, _, log_b) = run("b");
    assert_eq!(a, b);
    assert_eq!(a, a_loaded);
    assert_eq!(log_a, log_b);
}

#[test]
fn epoch_limit_drops_partial_batch() {
    let tok = tokenizer();
    let data = chunks(&tok, 16)[..5].to_vec();
    let mut cfg = tiny(Stage::Mlm, Precision::F32);
    cfg.max_epochs = Some(1);
    cfg.schedule.total_steps = 10;
    let mut model = build_model(&cfg, &tok, Some(&data)).unwrap();
    let report = run_stage(&cfg, &mut model, &tok, StageData::Chunks(&data)).unwrap();
    assert_eq!(report.steps, 1);
    assert!(report.dropped_partial_batch);
}

#[test]
fn masked_share_over_many_sequences() {
    let tok = tokenizer();
    let all = docs();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut masked, mut eligible) = (0usize, 0usize);
    for i in 0..1000 {
        let mut seq = tok.encode(&all[i % all.len()]);
        seq.truncate(128);
        masked += select_whole_word_mask(&seq, 0.3, &mut rng).len();
        eligible += seq.non_special_len();
    }
    let share = masked as f64 / eligible as f64;
    assert!((0.28..=0.34).contains(&share), "{share}");
}
