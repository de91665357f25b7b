//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use melkit_core::eval::{gold_rank, topk_accuracy, Gold};
use melkit_core::fuzzy::{fold, indel_ratio};
use melkit_core::gateway::{ChatRequest, GatewayConfig, GatewayError, HttpGateway, MockGateway, ModelGateway};
use melkit_core::kb::{self, Entity, Mention};
use melkit_core::pipeline::{Ablation, LinkResult};
use melkit_core::prompt::{render_entity_summary_prompt, render_mention_prompt};
use melkit_core::retrieval::{build_index, retrieve_topk, EntityText, RetrievalError, ScoredCandidate, VectorIndex};
use melkit_core::selection::{parse_selection, render_selection_prompt, Fallback, TableRow};
use melkit_core::synthetic;
use melkit_core::testing::FakeServer;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if let false = $cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6d656c6b6974 ^ stream)
}

// ---------------------------------------------------------------- metric

/// Sorts scores descending and scans for the first slot holding the gold's
/// score; that position is the number of strictly better candidates.
fn scan_rank(ranking: &[ScoredCandidate], gold: &str) -> Option<usize> {
    let g = ranking.iter().find(|c| c.entity_id == gold)?.score;
    let mut scores: Vec<f64> = ranking.iter().map(|c| c.score).collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores.iter().position(|&s| s == g)
}

fn random_ranking(r: &mut ChaCha8Rng, n: usize) -> Vec<ScoredCandidate> {
    // A coarse grid half the time so ties are frequent.
    let coarse = r.random_bool(0.5);
    (0..n)
        .map(|i| ScoredCandidate {
            entity_id: format!("e{i}"),
            score: if coarse { r.random_range(0..5) as f64 / 4.0 } else { r.random_range(-1.0..1.0) },
        })
        .collect()
}

fn random_results(r: &mut ChaCha8Rng) -> (Vec<LinkResult>, Vec<String>) {
    let n = r.random_range(1..=100);
    let mut results = Vec::with_capacity(n);
    let mut golds = Vec::with_capacity(n);
    for j in 0..n {
        let c = r.random_range(1..=20);
        results.push(LinkResult {
            mention_id: format!("m{j}"),
            predicted: String::new(),
            ranking: random_ranking(r, c),
            selection: None,
        });
        // Sometimes the gold is outside the candidates.
        golds.push(format!("e{}", r.random_range(0..c + 2)));
    }
    (results, golds)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    for case in 0..1000 {
        let (results, gold_ids) = random_results(&mut r);
        let golds: Vec<Gold> = results.iter().zip(&gold_ids).map(|(x, g)| (x.mention_id.as_str(), g.as_str())).collect();
        let k = r.random_range(1..=20);
        let hits = results
            .iter()
            .zip(&gold_ids)
            .filter(|(x, g)| scan_rank(&x.ranking, g).is_some_and(|p| p < k))
            .count();
        let want = hits as f64 / results.len() as f64;
        let got = topk_accuracy(&results, &golds, k).map_err(|e| e.to_string())?;
        ensure!(got.to_bits() == want.to_bits(), "case {case}: k={k} got {got} want {want}");
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(5), "took {t:?}");
    Ok(format!("1000 result sets bit-identical to the oracle in {t:.2?}"))
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut checks = 0usize;
    for case in 0..10_000 {
        let c = r.random_range(1..=20);
        let ranking = random_ranking(&mut r, c);
        let gold = format!("e{}", r.random_range(0..c));
        let result = LinkResult { mention_id: "m".into(), predicted: String::new(), ranking: ranking.clone(), selection: None };
        let golds: [Gold; 1] = [("m", gold.as_str())];
        let mut prev = 0.0;
        for k in 1..=21 {
            let acc = topk_accuracy(std::slice::from_ref(&result), &golds, k).map_err(|e| e.to_string())?;
            ensure!(acc >= prev, "case {case}: Top-{k} {acc} < Top-{} {prev}", k - 1);
            prev = acc;
            checks += 1;
        }
        // Tie with the maximum: force the gold onto the best score.
        let max = ranking.iter().map(|x| x.score).fold(f64::NEG_INFINITY, f64::max);
        let mut tied = ranking;
        tied.iter_mut().find(|x| x.entity_id == gold).unwrap().score = max;
        ensure!(gold_rank(&tied, &gold) == Ok(0), "case {case}: tied gold not ranked 0");
        checks += 1;
    }
    Ok(format!("10000 cases, {checks} assertions, 0 violations"))
}

// ------------------------------------------------------------- retrieval

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let words = ["river", "castle", "harbor", "north", "stone", "glass", "festival", "rail", "comet", "salt", "amber", "reed"];
    let phrase = |r: &mut ChaCha8Rng| {
        let n = r.random_range(2..7);
        (0..n).map(|_| *words.choose(r).unwrap()).collect::<Vec<_>>().join(" ")
    };
    let mut texts: Vec<String> = (0..900).map(|_| phrase(&mut r)).collect();
    // Exact duplicates give exactly tied scores.
    for i in 0..100 {
        texts.push(texts[i * 7].clone());
    }
    let mock = MockGateway::new(7, 256);
    let rows = mock.embed(&texts).map_err(|e| e.to_string())?;
    let mut ids: Vec<String> = (0..1000).map(|i| format!("Q{:04}", (i * 7919) % 10_007)).collect();
    ids.dedup();
    let index = VectorIndex::from_embeddings(ids, &rows, "mock").map_err(|e| e.to_string())?;

    let queries: Vec<String> = (0..200).map(|_| phrase(&mut r)).collect();
    let qs = mock.embed(&queries).map_err(|e| e.to_string())?;
    for (qi, q) in qs.iter().enumerate() {
        let q = q.values();
        let norm = q.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        let qn: Vec<f64> = q.iter().map(|&x| x as f64 / norm).collect();
        let mut all: Vec<(f64, &str)> = (0..index.len())
            .map(|i| {
                let dot = index.row(i).iter().zip(&qn).fold(0.0f64, |s, (&a, &b)| s + a as f64 * b);
                (dot.clamp(-1.0, 1.0), index.ids()[i].as_str())
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        for k in [1, 5, 10, 20] {
            let got = retrieve_topk("q", q, &index, k, None).map_err(|e| e.to_string())?;
            let want = &all[..k];
            ensure!(got.entries.len() == k, "query {qi} k={k}: {} entries", got.entries.len());
            for (g, w) in got.entries.iter().zip(want) {
                ensure!(
                    g.entity_id == w.1 && g.score.to_bits() == w.0.to_bits(),
                    "query {qi} k={k}: got {} {} want {} {}",
                    g.entity_id,
                    g.score,
                    w.1,
                    w.0
                );
            }
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(10), "took {t:?}");
    Ok(format!("200 queries x k in {{1,5,10,20}} over 1000 rows match the full sort in {t:.2?}"))
}

// --------------------------------------------------------------- prompts

fn fixture(name: &str) -> Result<String, String> {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name);
    std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))
}

fn court_rows() -> Vec<TableRow> {
    let mut rows = vec![TableRow {
        entity_id: "Q7643015".into(),
        name: "Superior Court (TV series)".into(),
        text: "Superior Court was a syndicated court show that …".into(),
    }];
    rows.extend((1..5).map(|i| TableRow { entity_id: format!("x{i}"), name: format!("entity{i}"), text: String::new() }));
    rows
}

fn criterion_4() -> Outcome {
    let apec = Entity::new(
        "Q170329",
        "Asia-Pacific Economic Cooperation",
        "The Asia-Pacific Economic Cooperation (APEC;  AY-pek) is an inter-governmental forum for 21 member economies...",
    );
    let court = Entity::new(
        "Q7643015",
        "Superior Court (TV series)",
        "Superior Court is a dramatized court show that aired in syndication from 1986 to 1989, and …",
    );
    let mut court_m = Mention::new(
        "court",
        "Superior Court",
        "The third dated stamp; October 6, 2008. A stamp belonging to the Superior Court with the registrar's signature and mark of acceptance.",
    );
    court_m.extra.insert("category".into(), json!("Organization"));
    let apec_m = Mention::new("apec", "APEC", "APEC Leaders wave for the media dressed in Driza-Bones in Sydney...");

    let mut court_sel = court_m.clone();
    court_sel.description = Some(
        "Superior Court is a legal organization that operates within a court system, providing a forum for the \
resolution of disputes and the administration of justice."
            .into(),
    );
    let mut apec_sel = apec_m.clone();
    apec_sel.description = Some(
        "The APEC is a regional economic forum comprising 21 member economies in the Asia-Pacific region. It was \
established in 1989 to foster economic cooperation..."
            .into(),
    );
    let apec_rows = [TableRow {
        entity_id: apec.id.clone(),
        name: apec.name.clone(),
        text: "APEC is an inter-governmental forum of 21 members...".into(),
    }];

    let cases: Vec<(&str, String)> = vec![
        ("apec_entity_prompt.txt", render_entity_summary_prompt(&apec)),
        ("superior_court_entity_prompt.txt", render_entity_summary_prompt(&court)),
        ("apec_mention_prompt.txt", render_mention_prompt(&apec_m).0),
        ("superior_court_mention_prompt.txt", render_mention_prompt(&court_m).0),
        ("apec_selection_prompt.txt", render_selection_prompt(&apec_sel, &apec_rows).map_err(|e| e.to_string())?),
        (
            "superior_court_selection_prompt.txt",
            render_selection_prompt(&court_sel, &court_rows()).map_err(|e| e.to_string())?,
        ),
    ];
    for (name, rendered) in &cases {
        let want = fixture(name)?;
        ensure!(*rendered == want, "{name} differs:\n--- rendered\n{rendered}\n--- fixture\n{want}");
    }
    Ok(format!("{} prompts byte-identical to fixtures", cases.len()))
}

// ----------------------------------------------------------------- parse

fn table(k: usize) -> Vec<TableRow> {
    (0..k)
        .map(|i| TableRow { entity_id: format!("Q{i}"), name: format!("Candidate {i} \"x\" {{y}}"), text: format!("text {i}") })
        .collect()
}

/// Adversarial replies, each with the index it must resolve to when that is
/// determined by the reply.
fn corpus(r: &mut ChaCha8Rng, k: usize, rows: &[TableRow]) -> Vec<(String, Option<usize>)> {
    let mut out = Vec::with_capacity(500);
    let name_json = |i: usize| serde_json::to_string(&rows[i].name).unwrap();
    for n in 0..125 {
        // Fenced, with valid, out-of-range or non-numeric ids.
        let i = r.random_range(0..k);
        let (id, expect) = match n % 4 {
            0 => (format!("\"{i}\""), Some(i)),
            1 => (format!("\" {i} \""), Some(i)),
            2 => (format!("\"{}\"", k + r.random_range(0..50)), Some(i)),
            _ => ("\"first\"".to_string(), Some(i)),
        };
        let (open, close) = if n % 3 == 0 { ("{{", "}}") } else { ("{", "}") };
        out.push((format!("```json\n{open}\n    \"id\": {id},\n    \"name\": {}\n{close}\n```", name_json(i)), expect));
    }
    for n in 0..125 {
        // Bare objects: numeric ids, name only via invalid id, unknown names.
        let i = r.random_range(0..k);
        let reply = match n % 3 {
            0 => (format!("{{\"id\": {i}, \"name\": \"whatever\"}}"), Some(i)),
            1 => (format!("{{\"name\": {}, \"id\": null}}", name_json(i)), Some(i)),
            _ => ("{\"id\": \"-1\", \"name\": \"nobody\"}".to_string(), Some(0)),
        };
        out.push(reply);
    }
    for n in 0..125 {
        // Prose around the answer, with stray braces before it.
        let i = r.random_range(0..k);
        let noise = ["Sure! {not json} ", "Answer: {\"id\": 3} then ", "I think } { maybe ", "Here you go:\n"][n % 4];
        out.push((
            format!("{noise}```json\n{{\"id\": \"{i}\", \"name\": {}}}\n``` Hope this helps {{", name_json(i)),
            Some(i),
        ));
    }
    let junk: Vec<char> = "{}[]\":,`\\ abc019 é漢\u{1F600}\n\t".chars().collect();
    while out.len() < 500 {
        let len = r.random_range(1..80);
        let s: String = (0..len).map(|_| *junk.choose(r).unwrap()).collect();
        if !s.trim().is_empty() {
            out.push((s, None));
        }
    }
    out
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let mut total = 0;
    for k in [1, 5, 10, 16] {
        let rows = table(k);
        for (n, (reply, expect)) in corpus(&mut r, k, &rows).iter().enumerate() {
            let res = parse_selection(reply, "m", &rows).map_err(|e| format!("K={k} case {n} {reply:?}: {e}"))?;
            ensure!(res.chosen_index < k, "K={k} case {n}: index {}", res.chosen_index);
            if let Some(want) = expect {
                ensure!(res.chosen_index == *want, "K={k} case {n} {reply:?}: got {} want {want}", res.chosen_index);
            }
            total += 1;
        }
        // Fill the prompt's own format block with each index.
        let m = Mention::new("m", "name", "context");
        let prompt = render_selection_prompt(&m, &rows).map_err(|e| e.to_string())?;
        let block = &prompt[prompt.rfind("```json").ok_or("no format block")?..];
        for (i, row) in rows.iter().enumerate() {
            let answer = block
                .replacen("\"id\": \"\"", &format!("\"id\": \"{i}\""), 1)
                .replacen("\"name\": \"\"", &format!("\"name\": {}", serde_json::to_string(&row.name).unwrap()), 1);
            let res = parse_selection(&answer, "m", &rows).map_err(|e| e.to_string())?;
            ensure!(res.chosen_index == i && res.fallback_used == Fallback::None, "K={k}: answer {i} parsed as {}", res.chosen_index);
        }
    }
    let res = parse_selection(&fixture("superior_court_selection_reply.txt")?, "court", &court_rows()).map_err(|e| e.to_string())?;
    ensure!(res.chosen_index == 0 && res.fallback_used == Fallback::None, "reference reply gave {res:?}");
    Ok(format!("{total} adversarial replies valid; round trip K in {{1,5,10,16}}; reference reply -> 0/none"))
}

// ----------------------------------------------------------------- fuzzy

fn dp_indel(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] } else { 1 + prev[j + 1].min(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

fn oracle_ratio(a: &str, b: &str) -> u8 {
    let (a, b) = (fold(a), fold(b));
    if a == b {
        return 100;
    }
    let total = a.len() + b.len();
    let same = 100 * (total - dp_indel(&a, &b));
    ((2 * same + total) / (2 * total)).min(99) as u8
}

fn random_string(r: &mut ChaCha8Rng) -> String {
    const SMALL: &[char] = &['a', 'b', 'c', 'A', 'B', 'C', 'é', 'É', 'ß', 'Σ', 'σ', 'ς', 'İ', ' ', '漢'];
    let len = r.random_range(0..=64);
    let small = r.random_bool(0.6);
    (0..len).map(|_| if small { *SMALL.choose(r).unwrap() } else { r.random::<char>() }).collect()
}

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    for case in 0..10_000 {
        let a = random_string(&mut r);
        let b = if case % 10 == 0 { a.clone() } else { random_string(&mut r) };
        let (got, want) = (indel_ratio(&a, &b), oracle_ratio(&a, &b));
        ensure!(got == want, "case {case}: {a:?} vs {b:?}: got {got} want {want}");
        ensure!(indel_ratio(&a, &a) == 100, "identity {a:?}");
        if !a.is_empty() {
            ensure!(indel_ratio("", &a) == 0 && indel_ratio(&a, "") == 0, "empty vs {a:?}");
        }
    }
    Ok("10000 pairs match the DP oracle; identity 100; empty 0".into())
}

// ------------------------------------------------------------------- cli

fn melkit(dir: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_melkit"))
        .current_dir(dir)
        .args(args)
        .env_remove("MELKIT_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    ensure!(o.status.success(), "{args:?} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    Ok(out)
}

fn read_report(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let table = melkit(dir, &["demo", "--report", "gold.json"])?;
    let gold = read_report(&dir.join("gold.json"))?;
    ensure!(gold["topk"]["1"] == 1.0 && gold["topk"]["5"] == 1.0, "always-gold topk {}", gold["topk"]);
    ensure!(gold["n_mentions"] == 20, "n_mentions {}", gold["n_mentions"]);
    ensure!(table.contains("Top-1") && table.contains("1.000"), "table:\n{table}");

    let mut runs = Vec::new();
    for (i, jobs) in ["1", "4", "4"].iter().enumerate() {
        let name = format!("hash{i}.json");
        melkit(dir, &["--mock-selection", "hash-choice", "--jobs", jobs, "demo", "--report", &name])?;
        let rep = read_report(&dir.join(&name))?;
        runs.push((rep["topk"].clone(), rep["mentions"].clone()));
    }
    ensure!(runs.windows(2).all(|w| w[0] == w[1]), "hash-choice runs differ");
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(30), "took {t:?}");
    Ok(format!("always-gold Top-1 = Top-5 = 1.0; hash-choice Top-1 = {} in 3 identical runs; {t:.2?}", runs[0].0["1"]))
}

/// Three mentions, each with a decoy whose summary repeats the mention text
/// (ranked first by retrieval) and a gold whose summary only overlaps it.
fn ablation_fixture(dir: &Path) -> Result<(), String> {
    let specs = [
        ("Lantern Quay", "crowds gather under hanging lanterns along the old quay wall", "a harbour district known for its night market and ferries"),
        ("Basalt Ridge", "hikers cross the dark columns of the ridge at dawn", "a volcanic escarpment with hexagonal stone pillars"),
        ("Orchid Vault", "glass cases of rare orchids line the humid vault", "a botanical conservatory built into a former bank"),
    ];
    let mut entities = Vec::new();
    let mut mentions = Vec::new();
    for (i, (name, context, desc)) in specs.iter().enumerate() {
        let mut decoy = Entity::new(format!("D{i}"), *name, "decoy");
        decoy.summary = Some(format!("{context} {desc}"));
        let mut gold = Entity::new(format!("G{i}"), format!("{name} (place)"), "gold");
        gold.summary = Some(desc.to_string());
        entities.extend([decoy, gold]);
        let mut m = Mention::new(format!("m{i}"), *name, *context);
        m.description = Some(desc.to_string());
        m.gold_entity_id = Some(format!("G{i}"));
        mentions.push(m);
    }
    kb::save_entities(dir.join("entities.jsonl"), &entities).map_err(|e| e.to_string())?;
    kb::save_mentions(dir.join("mentions.jsonl"), &mentions).map_err(|e| e.to_string())?;
    let cfg = "[paths]\nentities = \"entities.jsonl\"\nmentions = \"mentions.jsonl\"\nsplits = \"splits.json\"\n\
index = \"entities.melx\"\ncache_dir = \"cache\"\n\
[llm]\nbackend = \"mock\"\nmock_selection = \"always-gold\"\n[mllm]\nbackend = \"mock\"\n[embedder]\nbackend = \"mock\"\n";
    std::fs::write(dir.join("melkit.toml"), cfg).map_err(|e| e.to_string())
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    ablation_fixture(dir)?;
    let mut fingerprints = BTreeMap::new();
    let mut reports = std::collections::HashMap::new();
    for a in Ablation::ALL {
        let name = format!("{a}.json");
        melkit(dir, &["--config", "melkit.toml", "--ablate", &a.to_string(), "evaluate", "--split", "all", "--report", &name])?;
        let rep = read_report(&dir.join(&name))?;
        fingerprints.insert(a.to_string(), rep["config_fingerprint"].as_str().unwrap_or_default().to_string());
        reports.insert(a, rep);
    }
    let distinct: HashSet<&String> = fingerprints.values().collect();
    ensure!(fingerprints.len() == 8 && distinct.len() == 8, "fingerprints not distinct: {fingerprints:?}");

    let (full, ablated) = (&reports[&Ablation::None], &reports[&Ablation::Selection]);
    for m in ablated["mentions"].as_array().unwrap() {
        ensure!(m["rank"] == 1, "fixture: retrieval should rank gold 2nd, got {m}");
    }
    ensure!(full["topk"]["1"] == 1.0 && full["topk"]["5"] == 1.0, "full pipeline {}", full["topk"]);
    ensure!(ablated["topk"]["1"] == 0.0 && ablated["topk"]["5"] == 1.0, "selection ablated {}", ablated["topk"]);
    Ok("8 distinct fingerprints; --ablate selection: Top-1 1.0 -> 0.0, Top-5 1.0 -> 1.0".into())
}

// ----------------------------------------------------------------- index

fn criterion_9() -> Outcome {
    let mut entities = synthetic::entities();
    for e in &mut entities {
        e.summary = Some(e.description.clone());
    }
    let index = build_index(&entities, &MockGateway::new(0, 256), EntityText::Summary).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("kb.melx");
    index.write(&path).map_err(|e| e.to_string())?;
    let back = VectorIndex::read(&path).map_err(|e| e.to_string())?;
    ensure!(back.ids() == index.ids() && back.dim() == index.dim(), "ids or dim differ");
    ensure!(back.model_tag() == index.model_tag(), "model tag differs");
    for i in 0..index.len() {
        let same = index.row(i).iter().zip(back.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "row {i} differs");
    }
    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    bytes[0] ^= 0xff;
    let bad = tmp.path().join("bad.melx");
    std::fs::write(&bad, &bytes).map_err(|e| e.to_string())?;
    ensure!(matches!(VectorIndex::read(&bad), Err(RetrievalError::BadMagic)), "bad magic accepted");
    Ok(format!("{} rows x {} dims bit-exact; wrong magic rejected", index.len(), index.dim()))
}

// --------------------------------------------------------------- gateway

fn http(server: &FakeServer, max_inflight: usize) -> HttpGateway {
    HttpGateway::new(GatewayConfig {
        endpoint_url: server.url(),
        api_key_env: "MELKIT_ACCEPTANCE_UNSET".into(),
        max_inflight,
        max_retries: 3,
        retry_base_delay_ms: 1,
        timeout_secs: 30.0,
        ..GatewayConfig::default()
    })
}

fn criterion_10() -> Outcome {
    let server = FakeServer::start();
    let g = http(&server, 1);
    g.chat(&ChatRequest::new("hello")).map_err(|e| e.to_string())?;
    let temp = server.requests()[0].json()["temperature"].as_f64();
    ensure!(temp == Some(0.0), "temperature {temp:?}");

    let server = FakeServer::start();
    server.set_delay(Duration::from_millis(2));
    let bound = 8;
    let g = Arc::new(http(&server, bound));
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..500).map(|_| {
            let g = g.clone();
            s.spawn(move || g.chat(&ChatRequest::new("x")))
        }).collect();
        handles.into_iter().map(|h| h.join().unwrap().map(|_| ())).collect::<Result<Vec<_>, _>>()
    })
    .map_err(|e| e.to_string())?;
    let peak = server.peak_inflight();
    ensure!(server.request_count() == 500, "{} requests", server.request_count());
    ensure!(peak <= bound, "peak in-flight {peak} > {bound}");

    let server = FakeServer::start();
    server.push_response(429, "{\"error\": \"rate limited\"}");
    let g = http(&server, 1);
    ensure!(g.chat(&ChatRequest::new("x")).is_ok(), "429 was not retried to success");
    ensure!(server.request_count() == 2, "429: {} requests", server.request_count());

    let server = FakeServer::start();
    server.push_response(401, "{\"error\": \"bad key\"}");
    let g = http(&server, 1);
    let err = g.chat(&ChatRequest::new("x"));
    ensure!(matches!(err, Err(GatewayError::HttpStatus { code: 401, .. })), "401 gave {err:?}");
    ensure!(server.request_count() == 1, "401 retried: {} requests", server.request_count());
    Ok(format!("temperature 0; 500 concurrent requests, peak in-flight {peak} <= {bound}; 429 retried; 401 not retried"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("metric oracle equivalence", criterion_1),
        ("retrieval oracle equivalence", criterion_2),
        ("metric monotonicity and tie rule", criterion_3),
        ("prompt goldens", criterion_4),
        ("parse totality and round trip", criterion_5),
        ("fuzzy oracle equivalence", criterion_6),
        ("end-to-end mock pipeline", criterion_7),
        ("ablation plumbing", criterion_8),
        ("index format round trip", criterion_9),
        ("gateway contract", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
