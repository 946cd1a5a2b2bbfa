use std::path::Path;

use convdr::binary::{decode_checkpoint, decode_store, encode_checkpoint, encode_store, load_checkpoint, save_checkpoint, Checkpoint};
use convdr::error::Error;
use convdr::formats::*;
use convdr_core::corpus::{generate, GenConfig};
use convdr_core::eval::{evaluate_run, qrels_from_conversations, QueryId, Run};
use convdr_core::index::EmbeddingStore;
use convdr_core::model::{ModelConfig, ModelParams, Pooling};
use convdr_core::tokenizer::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_gen(seed: u64) -> GenConfig {
    GenConfig {
        n_topics: 12,
        passages_per_topic: 4,
        n_conversations: 10,
        turns_min: 2,
        turns_max: 4,
        seed,
        ..Default::default()
    }
}

fn checkpoint() -> Checkpoint {
    let config = ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        context_len: 32,
        ff_mult: 2,
        dropout: 0.1,
        tie_embeddings: false,
    };
    Checkpoint {
        params: ModelParams::init(&config, 4).unwrap(),
        pooling: Pooling::FullSequence,
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint();
    let a = dir.path().join("a.crck");
    let b = dir.path().join("b.crck");
    save_checkpoint(&a, &ck).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded, ck);
    save_checkpoint(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn checkpoint_header_layout() {
    let bytes = encode_checkpoint(&checkpoint());
    assert_eq!(&bytes[..4], b"CRCK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 9);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 10);
    assert_eq!(&bytes[16..26], b"vocab_size");
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = encode_checkpoint(&checkpoint());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_checkpoint(&magic).unwrap_err().contains("CRCK"));
    let mut version = bytes;
    version[4] = 9;
    assert!(decode_checkpoint(&version).unwrap_err().contains("version"));
}

#[test]
fn store_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f32>> = (0..50).map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let ids = (0..50).map(|i| format!("passage-{i}")).collect();
    let store = EmbeddingStore::from_embeddings(ids, &rows).unwrap();
    let bytes = encode_store(&store);
    assert_eq!(&bytes[..4], b"CRVE");
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 50);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 7);
    let back = decode_store(&bytes).unwrap();
    let same_bits = back.data().iter().zip(store.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same_bits && back.ids() == store.ids());
    assert_eq!(encode_store(&back), bytes);
    assert!(decode_store(&bytes[..bytes.len() - 2]).is_err());
}

#[test]
fn store_with_unnormalized_rows_is_rejected() {
    let store = EmbeddingStore::from_embeddings(vec!["a".into()], &[vec![3.0, 4.0]]).unwrap();
    let mut bytes = encode_store(&store);
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&2.0f32.to_le_bytes());
    assert!(decode_store(&bytes).unwrap_err().contains("norm"));
}

#[test]
fn generated_corpus_roundtrips_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let write_dir = |name: &str| {
        let c = generate(&small_gen(42)).unwrap();
        let (train, eval) = c.split(3);
        let d = dir.path().join(name);
        write_corpus_dir(&d, &c.passages, &train, &eval).unwrap();
        (d, c)
    };
    let (a, corpus) = write_dir("a");
    let (b, _) = write_dir("b");
    for f in [PASSAGES_FILE, TRAIN_FILE, EVAL_FILE, EVAL_QRELS_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let loaded = read_corpus_dir(&a).unwrap();
    assert_eq!(loaded.passages, corpus.passages);
    assert_eq!([loaded.train, loaded.eval].concat(), corpus.conversations);
    let first = std::fs::read_to_string(a.join(PASSAGES_FILE)).unwrap();
    assert!(first.starts_with(r#"{"id":"p000000","text":"#));
    let conv = std::fs::read_to_string(a.join(TRAIN_FILE)).unwrap();
    let order = ["\"query\"", "\"response\"", "\"gold_passage_ids\"", "\"rewrite\"", "\"topic_id\""].map(|k| conv.find(k).unwrap());
    assert!(order.windows(2).all(|w| w[0] < w[1]));
}

fn expect_line(e: Error, want: usize) {
    match e {
        Error::Format { line, .. } => assert_eq!(line, want),
        other => panic!("expected a line error, got {other}"),
    }
}

#[test]
fn schema_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate(&small_gen(1)).unwrap();
    let p = dir.path().join("p.jsonl");
    let q = dir.path().join("c.jsonl");
    std::fs::write(&p, to_jsonl(&c.passages)).unwrap();
    let mut lines: Vec<String> = to_jsonl(&c.conversations[..3]).lines().map(String::from).collect();
    let bad: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    let mut bad = bad;
    bad["turns"][0].as_object_mut().unwrap().remove("gold_passage_ids");
    lines[2] = bad.to_string();
    std::fs::write(&q, lines.join("\n")).unwrap();
    let err = load_and_validate(&p, &q).unwrap_err();
    assert!(err.to_string().contains("gold_passage_ids"), "{err}");
    expect_line(err, 3);
}

#[test]
fn dangling_gold_id_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = generate(&small_gen(1)).unwrap();
    c.conversations[1].turns[0].gold_passage_ids = vec!["p999999".into()];
    let p = dir.path().join("p.jsonl");
    let q = dir.path().join("c.jsonl");
    std::fs::write(&p, to_jsonl(&c.passages)).unwrap();
    std::fs::write(&q, to_jsonl(&c.conversations)).unwrap();
    assert!(load_and_validate(&p, &q).unwrap_err().to_string().contains("p999999"));
}

#[test]
fn vocab_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let v = Vocab::build(["b a a c", "c c"], 1).unwrap();
    let path = dir.path().join("v.txt");
    write_vocab(&path, &v).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("<pad>\n<unk>\n<bos>\n<|user|>\n<|assistant|>\n<|passage|>\nc\na\nb\n"));
    assert_eq!(read_vocab(&path).unwrap(), v);
    std::fs::write(&path, "a\nb\n").unwrap();
    assert!(read_vocab(&path).is_err());
}

fn random_run(rng: &mut ChaCha8Rng) -> Run {
    let mut run = Run::new();
    for c in 0..5 {
        for t in 1..=3 {
            let list = (0..10).map(|i| (format!("p{i}"), rng.gen_range(-1.0..1.0))).collect();
            run.insert(QueryId::new(format!("c{c}"), t), list);
        }
    }
    run
}

#[test]
fn run_and_qrels_files_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let run = random_run(&mut rng);
    let text = format_run(&run, "test");
    assert!(text.lines().next().unwrap().starts_with("c0:1 Q0 p0 1 "));
    assert!(text.lines().all(|l| l.ends_with(" test")));
    let back = parse_run(Path::new("run"), &text).unwrap();
    assert_eq!(back, run);
    assert_eq!(format_run(&back, "test"), text);

    let c = generate(&small_gen(3)).unwrap();
    let qrels = qrels_from_conversations(&c.conversations);
    let q = format_qrels(&qrels);
    assert_eq!(parse_qrels(Path::new("qrels"), &q).unwrap(), qrels);
    assert!(q.lines().all(|l| l.split(' ').nth(1) == Some("0") && l.ends_with(" 1")));
}

#[test]
fn malformed_run_lines_are_reported() {
    let p = Path::new("run");
    expect_line(parse_run(p, "c:1 Q0 a 1 0.5 t\nc:1 Q0 b 2 x t\n").unwrap_err(), 2);
    expect_line(parse_run(p, "c:0 Q0 a 1 0.5 t\n").unwrap_err(), 1);
    expect_line(parse_run(p, "c:1 Q1 a 1 0.5 t\n").unwrap_err(), 1);
    assert!(parse_run(p, "c:1 Q0 a 1 0.5 t\nc:1 Q0 b 3 0.4 t\n").is_err());
    assert!(parse_run(p, "c:1 Q0 a 1 0.5 t\nc:1 Q0 a 2 0.4 t\n").is_err());
    expect_line(parse_qrels(p, "c:1 0 a\n").unwrap_err(), 1);
}

#[test]
fn report_json_has_fixed_key_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let run = random_run(&mut rng);
    let qrels = run.keys().map(|q| (q.clone(), [format!("p{}", q.turn)].into_iter().collect())).collect();
    let report = evaluate_run(&run, &qrels).unwrap();
    let json = report_json(&report);
    let keys = ["queries", "mrr", "ndcg_at_3", "hit_at_5", "hit_at_20", "hit_at_100", "hir_at_20", "hir_at_100", "per_turn"];
    let pos: Vec<usize> = keys.iter().map(|k| json.find(&format!("\"{k}\"")).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "{json}");
    let back: convdr_core::eval::EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}
