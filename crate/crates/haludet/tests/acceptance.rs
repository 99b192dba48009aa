//! Acceptance suite: one test per shipping guarantee, each ending in a
//! single PASS line (visible with `--nocapture`). Every randomized check
//! runs on a fixed seed and every numeric oracle is computed independently
//! of the code under test.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use haludet::action::{parse_step, serialize_step, AgentStep, ArgValue, Observation, ToolCall};
use haludet::backend::{ReplayBackend, Role, ScriptedBackend};
use haludet::engine::{Engine, EngineConfig};
use haludet::eval::{response_metrics, sentence_metrics};
use haludet::forge::{
    export_finetune, parse_transcript, validate_trajectory, RejectionReason, Trajectory,
    TrajectoryStep, YieldReport, YieldRow,
};
use haludet::toolbox::{
    calculator, equation, extensions, CorpusEntry, FixtureSearchProvider, HeuristicJudge,
    SandboxConfig, SearchDoc, ToolError, Toolbox, ToolboxDeps,
};
use haludet::types::{DetectionInput, Label, Language, TaskType};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn toolbox_with(search: FixtureSearchProvider) -> Toolbox {
    Toolbox::standard(ToolboxDeps {
        search: Arc::new(search),
        judge: Arc::new(HeuristicJudge::new()),
        sandbox: SandboxConfig::default(),
    })
}

fn engine_with(search: FixtureSearchProvider) -> Engine {
    Engine::new(toolbox_with(search), EngineConfig::default())
}

fn label(bit: bool) -> Label {
    if bit {
        Label::Hallucinated
    } else {
        Label::Clean
    }
}

/// Render one ReAct turn; `args` must be a JSON object literal.
fn turn(thought: &str, tool: &str, args: serde_json::Value) -> String {
    format!("Thought: {thought}\nAction: {tool}\nAction Input: {args}")
}

// --- exact metric recount ---------------------------------------------

fn frac(num: usize, den: usize) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

#[test]
fn metric_scores_match_a_brute_force_recount() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut pair_total = 0usize;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=200);
        pair_total += len;
        let pairs: Vec<(Label, Label)> = (0..len)
            .map(|_| (label(rng.gen_bool(0.5)), label(rng.gen_bool(0.5))))
            .collect();

        // Independent recount straight from the definition.
        let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
        for &(predicted, gold) in &pairs {
            match (
                predicted == Label::Hallucinated,
                gold == Label::Hallucinated,
            ) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fneg += 1,
            }
        }
        let accuracy = frac(tp + tn, len);
        let precision = frac(tp, tp + fp);
        let recall = frac(tp, tp + fneg);
        let pr_sum = &precision + &recall;
        let f1 = if pr_sum.is_zero() {
            BigRational::zero()
        } else {
            BigRational::from_integer(BigInt::from(2)) * &precision * &recall / pr_sum
        };

        let response = response_metrics(&pairs).unwrap();
        assert_eq!(response.matrix.true_pos, tp);
        assert_eq!(response.matrix.false_pos, fp);
        assert_eq!(response.matrix.true_neg, tn);
        assert_eq!(response.matrix.false_neg, fneg);
        assert_eq!(response.accuracy, accuracy);
        assert_eq!(response.f1, f1);

        let sentence = sentence_metrics(&pairs).unwrap();
        assert_eq!(sentence.accuracy, accuracy);
        assert_eq!(sentence.precision, precision);
        assert_eq!(sentence.recall, recall);
        assert_eq!(sentence.f1, f1);
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 5.0,
        "metric recount took {elapsed:?}, budget is 5s"
    );
    println!(
        "PASS: metrics match the brute-force recount on 1000 random pair lists \
         ({pair_total} pairs) in {elapsed:?}"
    );
}

// --- recorded average-speed case study --------------------------------

fn average_speed_input() -> DetectionInput {
    DetectionInput::new(
        "avg-speed-case",
        "A car drives 120 km in 3 hours, 20 km in 0.5 hours, and 60 km in 1.5 hours. \
         What is its average speed in km/h?",
        "The total distance is 120 + 20 + 60 = 200 km. \
         The total driving time is 3 + 0.5 + 1.5 = 4 hours. \
         Dividing, the average speed is 200 / 5 = 40 km/h.",
    )
    .with_task_type(TaskType::MathSolving)
}

#[test]
fn average_speed_replay_is_bit_identical_and_flags_the_time_sum() {
    let engine = engine_with(FixtureSearchProvider::empty());
    let input = average_speed_input();
    let path = fixture("avg_speed_replay.json");

    let mut renders = Vec::new();
    for _ in 0..3 {
        let backend = ReplayBackend::from_path(&path).unwrap();
        let outcome = engine.run(&input, &backend).unwrap();
        let report = outcome.report;
        assert_eq!(report.response_label, Label::Hallucinated);
        assert_eq!(report.turns_used, 7);
        let labels: Vec<u8> = report.verdicts.iter().map(|v| v.label.as_u8()).collect();
        assert_eq!(labels, [0, 1, 0], "only the time summation is flagged");
        let flagged = &report.verdicts[1];
        assert!(flagged.sentence.contains("total driving time"));
        assert_eq!(flagged.tool_used, "calculator");
        assert!(flagged.evidence.contains("3 + 0.5 + 1.5 = 5"));
        assert!(flagged.evidence.contains("5 != 4"));
        renders.push(format!(
            "{}\n{}",
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&outcome.trajectory).unwrap()
        ));
    }
    assert_eq!(renders[0], renders[1]);
    assert_eq!(renders[1], renders[2]);
    println!(
        "PASS: the recorded average-speed session replays bit-identically 3 times \
         and flags exactly the time-summation sentence"
    );
}

// --- 50-input scripted corpus ------------------------------------------

struct ScriptedCase {
    input: DetectionInput,
    turns: Vec<String>,
}

fn case(
    id: String,
    query: &str,
    response: &str,
    task: TaskType,
    gold: Label,
    verify_turn: String,
    evidence: String,
) -> ScriptedCase {
    ScriptedCase {
        input: DetectionInput::new(id, query, response)
            .with_task_type(task)
            .with_gold_label(gold)
            .with_dataset(task.as_str()),
        turns: vec![
            verify_turn,
            turn(
                "Record what the evidence shows.",
                "record_verdict",
                serde_json::json!({"label": gold.as_u8(), "evidence": evidence}),
            ),
            turn("Done.", "get_answer", serde_json::json!({})),
        ],
    }
}

fn qa_cases() -> Vec<ScriptedCase> {
    // (query, clean statement, hallucinated statement); the query hits one
    // entry of tests/fixtures/search_corpus.json.
    let facts = [
        (
            "How tall is the Eiffel Tower?",
            "The Eiffel Tower is 330 metres tall.",
            "The Eiffel Tower is 510 metres tall.",
        ),
        (
            "How long is the Amazon River?",
            "The Amazon River is about 6400 km long.",
            "The Amazon River is about 2000 km long.",
        ),
        (
            "What is the height of Mount Everest?",
            "Mount Everest rises 8849 metres above sea level.",
            "Mount Everest rises 7200 metres above sea level.",
        ),
        (
            "Water boils at what temperature at sea level?",
            "Water boils at 100 degrees Celsius at sea level.",
            "Water boils at 120 degrees Celsius at sea level.",
        ),
        (
            "In which year did Apollo 11 land on the Moon?",
            "Apollo 11 landed on the Moon in 1969.",
            "Apollo 11 landed on the Moon in 1972.",
        ),
        (
            "What is the speed of light?",
            "Light travels at about 299792 km per second.",
            "Light travels at about 150000 km per second.",
        ),
        (
            "What is the capital of Australia?",
            "The capital of Australia is Canberra.",
            "The capital of Australia is Sydney.",
        ),
        (
            "How many chromosomes does a human cell have?",
            "A typical human cell has 46 chromosomes.",
            "A typical human cell has 44 chromosomes.",
        ),
        (
            "Is the Pacific Ocean the largest ocean on Earth?",
            "The Pacific Ocean is the largest ocean on Earth.",
            "The Atlantic Ocean is the largest ocean on Earth.",
        ),
        (
            "How long is the Great Wall of China?",
            "The Great Wall of China is over 21000 km long.",
            "The Great Wall of China is about 800 km long.",
        ),
    ];
    facts
        .iter()
        .enumerate()
        .map(|(i, (query, clean, wrong))| {
            let gold = label(i % 2 == 1);
            let response = if gold == Label::Clean { clean } else { wrong };
            case(
                format!("qa-{i}"),
                query,
                response,
                TaskType::KnowledgeQa,
                gold,
                turn(
                    "Look the fact up.",
                    "web_search",
                    serde_json::json!({"query": query}),
                ),
                format!(
                    "the retrieved snippet {} the sentence",
                    if gold == Label::Clean {
                        "supports"
                    } else {
                        "contradicts"
                    }
                ),
            )
        })
        .collect()
}

fn math_cases() -> Vec<ScriptedCase> {
    let equations = [
        ("17 * 23 = 391", true),
        ("7 + 5 = 13", false),
        ("144 / 12 = 12", true),
        ("9 * 9 = 91", false),
        ("256 + 128 = 384", true),
        ("84 / 4 = 22", false),
        ("1000 - 437 = 563", true),
        ("60 - 17 = 47", false),
        ("25 * 25 = 625", true),
        ("2 ^ 10 = 1025", false),
    ];
    equations
        .iter()
        .enumerate()
        .map(|(i, (eq, holds))| {
            let gold = label(!holds);
            case(
                format!("math-{i}"),
                &format!("What is {}?", eq.split('=').next().unwrap().trim()),
                &format!("{eq}."),
                TaskType::MathSolving,
                gold,
                turn(
                    "Check both sides of the equation.",
                    "check_equation",
                    serde_json::json!({"equation": eq}),
                ),
                format!(
                    "the equation {eq} {}",
                    if *holds { "holds" } else { "does not hold" }
                ),
            )
        })
        .collect()
}

fn code_cases() -> Vec<ScriptedCase> {
    let programs = [
        ("hello", "hello"),
        ("sum: 42", "sum: 41"),
        ("ready", "ready"),
        ("3 lines", "three lines"),
        ("done.", "done."),
        ("ok", "OK"),
        ("alpha", "alpha"),
        ("count=9", "count=10"),
        ("beta", "beta"),
        ("final", "Final"),
    ];
    programs
        .iter()
        .enumerate()
        .map(|(i, (wanted, printed))| {
            let gold = label(wanted != printed);
            let code = format!("print(\"{printed}\")");
            case(
                format!("code-{i}"),
                &format!("Write a Python program that prints \"{wanted}\"."),
                &format!("```python\n{code}\n```"),
                TaskType::CodeGeneration,
                gold,
                turn(
                    "Run the program and capture its output.",
                    "code_interpreter",
                    serde_json::json!({"code": code}),
                ),
                format!("the program prints \"{printed}\", the query asks for \"{wanted}\""),
            )
        })
        .collect()
}

fn conditional_cases() -> Vec<ScriptedCase> {
    // (requested word count, response); odd entries miss the count by two.
    let rows = [
        (3, "Dogs chase balls."),
        (3, "Dogs always chase the balls."),
        (4, "Cats nap in sunlight."),
        (4, "Cats often nap in warm sunlight."),
        (5, "Birds sing early every morning."),
        (5, "Birds sing early on every spring morning."),
        (6, "The red fox jumped over rocks."),
        (6, "The red fox jumped over the mossy rocks."),
        (7, "A quiet stream winds through the valley."),
        (7, "A quiet stream winds slowly through the green valley."),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, (wanted, response))| {
            let actual = response.split_whitespace().count();
            let gold = label(actual != *wanted);
            case(
                format!("cond-{i}"),
                &format!("Write a sentence with exactly {wanted} words."),
                response,
                TaskType::ConditionalGeneration,
                gold,
                turn(
                    "Count the words in the response.",
                    "word_count",
                    serde_json::json!({"text": response}),
                ),
                format!("the response has {actual} words, the query asks for {wanted}"),
            )
        })
        .collect()
}

fn semantic_cases() -> Vec<ScriptedCase> {
    let rows = [
        (
            "The museum opens at 9 am and closes at 5 pm.",
            "The museum opens at 9 am.",
            false,
        ),
        (
            "The meeting starts at 9 am in Room 4.",
            "The meeting starts at 11 am.",
            true,
        ),
        (
            "Ana moved from Lisbon to Oslo in 2019.",
            "Ana moved to Oslo in 2019.",
            false,
        ),
        (
            "Leo adopted a grey cat named Miso.",
            "Leo adopted a grey dog named Miso.",
            true,
        ),
        (
            "The recipe needs two eggs and a cup of flour.",
            "The recipe needs two eggs.",
            false,
        ),
        (
            "The bridge was finished in 1932.",
            "The bridge was finished in 1954.",
            true,
        ),
        (
            "Train 402 departs from platform 6 at noon.",
            "Train 402 departs at noon.",
            false,
        ),
        (
            "The shop is closed on Sundays.",
            "The shop is open every Sunday.",
            true,
        ),
        (
            "The library lends books for three weeks.",
            "The library lends books for three weeks at a time.",
            false,
        ),
        (
            "Maria speaks Spanish and French.",
            "Maria speaks only German.",
            true,
        ),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, (premise, claim, contradicts))| {
            let gold = label(*contradicts);
            case(
                format!("sem-{i}"),
                &format!("{premise} Is the following consistent with it?"),
                claim,
                TaskType::SemanticConsistency,
                gold,
                turn(
                    "Compare the claim against the premise.",
                    "match",
                    serde_json::json!({"text_a": premise, "text_b": claim}),
                ),
                format!(
                    "the claim {} the premise",
                    if *contradicts {
                        "contradicts"
                    } else {
                        "is supported by"
                    }
                ),
            )
        })
        .collect()
}

#[test]
fn scripted_corpus_of_fifty_inputs_matches_gold_labels() {
    let started = Instant::now();
    let corpus = FixtureSearchProvider::from_path(&fixture("search_corpus.json")).unwrap();
    let engine = engine_with(corpus);

    let mut cases = Vec::new();
    cases.extend(qa_cases());
    cases.extend(conditional_cases());
    cases.extend(semantic_cases());
    cases.extend(math_cases());
    cases.extend(code_cases());
    assert_eq!(cases.len(), 50);
    for task in TaskType::ALL {
        let per_task = cases
            .iter()
            .filter(|c| c.input.task_type == Some(task))
            .count();
        assert_eq!(per_task, 10, "{} must have 10 cases", task.as_str());
    }

    let mut matched = 0usize;
    for case in &cases {
        let backend = ScriptedBackend::new(case.turns.clone());
        let outcome = engine
            .run(&case.input, &backend)
            .unwrap_or_else(|e| panic!("{} failed: {e}", case.input.id));
        assert_eq!(
            outcome.report.response_label,
            case.input.gold_label.unwrap(),
            "{} label mismatch",
            case.input.id
        );
        matched += 1;
    }
    let elapsed = started.elapsed();
    assert_eq!(matched, 50);
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "corpus run took {elapsed:?}, budget is 10s"
    );
    println!("PASS: 50/50 scripted sessions reproduce their gold labels in {elapsed:?}");
}

// --- calculator and equation checking -----------------------------------

enum Expr {
    Num(BigRational),
    Bin(char, Box<Expr>, Box<Expr>),
}

fn eval_expr(expr: &Expr) -> BigRational {
    match expr {
        Expr::Num(r) => r.clone(),
        Expr::Bin(op, a, b) => {
            let (a, b) = (eval_expr(a), eval_expr(b));
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => a / b,
                _ => unreachable!(),
            }
        }
    }
}

fn gen_expr(rng: &mut ChaCha8Rng, depth: usize) -> Expr {
    if depth == 0 || rng.gen_bool(0.35) {
        if rng.gen_bool(0.5) {
            Expr::Num(BigRational::from_integer(BigInt::from(
                rng.gen_range(-99i64..=99),
            )))
        } else {
            // One decimal digit, e.g. -43.7, kept exact as tenths.
            Expr::Num(BigRational::new(
                BigInt::from(rng.gen_range(-999i64..=999)),
                BigInt::from(10),
            ))
        }
    } else {
        let op = ['+', '-', '*', '/'][rng.gen_range(0..4)];
        let lhs = gen_expr(rng, depth - 1);
        let rhs = loop {
            let candidate = gen_expr(rng, depth - 1);
            if op != '/' || !eval_expr(&candidate).is_zero() {
                break candidate;
            }
        };
        Expr::Bin(op, Box::new(lhs), Box::new(rhs))
    }
}

fn render_expr(expr: &Expr) -> String {
    match expr {
        Expr::Num(r) => render_rational(r),
        Expr::Bin(op, a, b) => format!("({} {} {})", render_expr(a), op, render_expr(b)),
    }
}

/// Integers as "n", tenths as "x.y", everything else as "p/q".
fn render_rational(r: &BigRational) -> String {
    if r.is_integer() {
        return r.numer().to_string();
    }
    let tenths = r * BigRational::from_integer(BigInt::from(10));
    if tenths.is_integer() {
        let t = tenths.numer();
        let sign = if t < &BigInt::from(0) { "-" } else { "" };
        let magnitude = if t < &BigInt::from(0) { -t } else { t.clone() };
        return format!(
            "{sign}{}.{}",
            &magnitude / BigInt::from(10),
            &magnitude % BigInt::from(10)
        );
    }
    format!("{}/{}", r.numer(), r.denom())
}

#[test]
fn equation_checks_agree_with_exact_rational_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut correct = 0usize;
    for i in 0..1000 {
        let expr = gen_expr(&mut rng, 3);
        let value = eval_expr(&expr);
        let clean = i % 2 == 0;
        let rhs = if clean {
            render_rational(&value)
        } else {
            let delta = BigRational::new(
                BigInt::from(rng.gen_range(1i64..=9)),
                BigInt::from(rng.gen_range(1i64..=9)),
            );
            let sign = if rng.gen_bool(0.5) { '+' } else { '-' };
            format!(
                "{} {} {}",
                render_rational(&value),
                sign,
                render_rational(&delta)
            )
        };
        let equation = format!("{} = {}", render_expr(&expr), rhs);
        let check = equation::check_equation(&equation, None)
            .unwrap_or_else(|e| panic!("equation {equation} failed: {e}"));
        assert_eq!(
            check.holds,
            clean,
            "misclassified ({}clean): {equation}",
            if clean { "" } else { "not " }
        );
        correct += 1;
    }
    assert_eq!(correct, 1000);

    // Algebraic drift check: exact commutativity and associativity.
    let rat = |rng: &mut ChaCha8Rng| {
        BigRational::new(
            BigInt::from(rng.gen_range(-999i64..=999)),
            BigInt::from(rng.gen_range(1i64..=99)),
        )
    };
    for _ in 0..10_000 {
        let (a, b, c) = (rat(&mut rng), rat(&mut rng), rat(&mut rng));
        let (ra, rb, rc) = (
            render_rational(&a),
            render_rational(&b),
            render_rational(&c),
        );
        let eval = |s: String| {
            calculator::evaluate(&s)
                .unwrap_or_else(|e| panic!("{s} failed: {e}"))
                .as_exact()
                .cloned()
                .unwrap_or_else(|| panic!("{s} fell out of exact mode"))
        };
        assert_eq!(eval(format!("{ra} + {rb}")), &a + &b);
        assert_eq!(eval(format!("{rb} + {ra}")), &a + &b);
        assert_eq!(eval(format!("({ra} + {rb}) + {rc}")), &a + &b + &c);
        assert_eq!(eval(format!("{ra} + ({rb} + {rc})")), &a + &b + &c);
        assert_eq!(eval(format!("{ra} * {rb}")), &a * &b);
        assert_eq!(eval(format!("{rb} * {ra}")), &a * &b);
        assert_eq!(eval(format!("({ra} * {rb}) * {rc}")), &a * &b * &c);
        assert_eq!(eval(format!("{ra} * ({rb} * {rc})")), &a * &b * &c);
    }
    println!(
        "PASS: 1000/1000 random equations classified exactly; \
         10000 commutativity/associativity cases with zero drift"
    );
}

// --- search snippet cap --------------------------------------------------

#[test]
fn search_serves_at_most_five_snippets_for_any_provider_size() {
    for size in 0..=20usize {
        let entries = if size == 0 {
            Vec::new()
        } else {
            vec![CorpusEntry {
                keywords: vec!["probe".to_string()],
                docs: (0..size)
                    .map(|i| SearchDoc {
                        title: format!("Doc {i}"),
                        snippet: format!("snippet number {i}"),
                    })
                    .collect(),
            }]
        };
        let toolbox = toolbox_with(FixtureSearchProvider::new(entries));
        let mut arguments = IndexMap::new();
        arguments.insert(
            "query".to_string(),
            ArgValue::Text("probe request".to_string()),
        );
        let call = ToolCall::new("web_search", arguments);
        match toolbox.invoke(&call) {
            Ok(text) => {
                let listed = text.lines().filter(|l| l.starts_with('[')).count();
                assert_eq!(listed, size.min(5), "provider size {size}");
                assert!(text.starts_with(&format!("{} document(s):", size.min(5))));
            }
            Err(ToolError::NoEvidence) => {
                assert_eq!(size, 0, "only an empty provider yields NoEvidence")
            }
            Err(other) => panic!("provider size {size}: unexpected error {other}"),
        }
    }
    println!("PASS: web_search caps output at five snippets for provider sizes 0-20");
}

// --- seeded action round trip --------------------------------------------

const WORD_POOL: [&str; 24] = [
    "check",
    "sum",
    "合計を確認",
    "vérifier",
    "Überprüfung",
    "данные",
    "ответ",
    "🔍",
    "≠",
    "评估句子",
    "précision",
    "εντάξει",
    "ok",
    "therefore",
    "next",
    "step",
    "value",
    "result",
    "claim",
    "evidence",
    "검증",
    "πράξη",
    "totale",
    "falsch",
];

fn rand_identifier(rng: &mut ChaCha8Rng) -> String {
    let heads = "abcdefghijklmnopqrstuvwxyz_";
    let tails = "abcdefghijklmnopqrstuvwxyz0123456789_";
    let mut out = String::new();
    out.push(
        heads
            .chars()
            .nth(rng.gen_range(0..heads.chars().count()))
            .unwrap(),
    );
    for _ in 0..rng.gen_range(0..8) {
        out.push(
            tails
                .chars()
                .nth(rng.gen_range(0..tails.chars().count()))
                .unwrap(),
        );
    }
    out
}

fn rand_words(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.gen_range(1..=max);
    (0..n)
        .map(|_| WORD_POOL[rng.gen_range(0..WORD_POOL.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Thought text: possibly empty, possibly multi-line, never mimicking the
/// grammar labels and never ending in a newline.
fn rand_thought(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.15) {
        return String::new();
    }
    let lines = rng.gen_range(1..=3);
    (0..lines)
        .map(|_| rand_words(rng, 5))
        .collect::<Vec<_>>()
        .join("\n")
}

fn rand_text_value(rng: &mut ChaCha8Rng) -> String {
    let pieces = rng.gen_range(0..=5);
    let mut out = String::new();
    for i in 0..pieces {
        if i > 0 {
            out.push(if rng.gen_bool(0.25) { '\n' } else { ' ' });
        }
        out.push_str(WORD_POOL[rng.gen_range(0..WORD_POOL.len())]);
    }
    out
}

fn rand_step(rng: &mut ChaCha8Rng) -> AgentStep {
    let tool = loop {
        let name = rand_identifier(rng);
        // The alias never serializes back to itself, so skip it.
        if name != "word_counter" {
            break name;
        }
    };
    let mut arguments = IndexMap::new();
    for _ in 0..rng.gen_range(0..=3) {
        let value = if rng.gen_bool(0.4) {
            ArgValue::Int(rng.gen())
        } else {
            ArgValue::Text(rand_text_value(rng))
        };
        arguments.insert(rand_identifier(rng), value);
    }
    AgentStep::new(rand_thought(rng), ToolCall::new(tool, arguments))
}

#[test]
fn action_grammar_round_trips_five_hundred_seeded_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut passed = 0usize;
    for i in 0..500 {
        let step = rand_step(&mut rng);
        let text = serialize_step(&step);
        let parsed =
            parse_step(&text).unwrap_or_else(|e| panic!("case {i}: {e}\nserialized:\n{text}"));
        assert_eq!(parsed, step, "case {i} drifted through the round trip");
        passed += 1;
    }
    assert_eq!(passed, 500);
    println!("PASS: 500/500 random action steps survive parse(serialize(s)) = s");
}

// --- defect filtering -----------------------------------------------------

fn clean_stored_trajectories(engine: &Engine) -> Vec<(Label, Trajectory)> {
    (0..10)
        .map(|i| {
            let (a, b) = (3 + i as i64, 5 + 2 * i as i64);
            let truth = a + b;
            let (claim, gold) = if i % 2 == 0 {
                (truth, Label::Clean)
            } else {
                (truth + 1, Label::Hallucinated)
            };
            let input = DetectionInput::new(
                format!("filter-{i}"),
                format!("What is {a} + {b}?"),
                format!("{a} + {b} = {claim}."),
            )
            .with_task_type(TaskType::MathSolving)
            .with_gold_label(gold);
            let outcome = engine.run_fallback(&input).unwrap();
            (gold, outcome.trajectory)
        })
        .collect()
}

#[test]
fn filtering_rejects_every_defect_class_with_its_reason() {
    let engine = engine_with(FixtureSearchProvider::empty());
    let clean = clean_stored_trajectories(&engine);

    let mut corpus: Vec<(Label, Trajectory, Option<RejectionReason>)> = Vec::new();
    for (gold, trajectory) in &clean {
        corpus.push((*gold, trajectory.clone(), None));
    }
    for (gold, trajectory) in &clean {
        let mut bad = trajectory.clone();
        assert_eq!(bad.steps[0].step.action.tool_name, "check_equation");
        bad.steps[0].step.action.tool_name = "telescope".to_string();
        corpus.push((*gold, bad, Some(RejectionReason::WrongToolInvocation)));
    }
    for (gold, trajectory) in &clean {
        let mut bad = trajectory.clone();
        // A thought line that mimics an Action label breaks the
        // serialize/parse round trip without touching the structured call.
        bad.steps[0].step.thought = "ok\nAction: sneak".to_string();
        corpus.push((*gold, bad, Some(RejectionReason::FormattingError)));
    }
    for (gold, trajectory) in &clean {
        let flipped = label(*gold == Label::Clean);
        corpus.push((
            flipped,
            trajectory.clone(),
            Some(RejectionReason::LabelInconsistent),
        ));
    }
    assert_eq!(corpus.len(), 40);

    let mut row = YieldRow {
        dataset: "crafted".to_string(),
        attempted: 0,
        accepted: 0,
        rejected: BTreeMap::new(),
    };
    for (gold, trajectory, expected) in &corpus {
        row.attempted += 1;
        match validate_trajectory(trajectory, *gold, engine.toolbox()) {
            Ok(()) => {
                assert_eq!(*expected, None, "{} wrongly accepted", trajectory.id);
                row.accepted += 1;
            }
            Err(reasons) => {
                let expected = expected
                    .unwrap_or_else(|| panic!("{} wrongly rejected: {reasons:?}", trajectory.id));
                assert_eq!(reasons, vec![expected], "{}", trajectory.id);
                *row.rejected.entry(reasons[0]).or_insert(0) += 1;
            }
        }
    }
    assert_eq!(row.accepted, 10);
    assert_eq!(
        row.rejected.get(&RejectionReason::WrongToolInvocation),
        Some(&10)
    );
    assert_eq!(
        row.rejected.get(&RejectionReason::FormattingError),
        Some(&10)
    );
    assert_eq!(
        row.rejected.get(&RejectionReason::LabelInconsistent),
        Some(&10)
    );
    assert_eq!(row.accepted + row.rejected_total(), row.attempted);
    assert_eq!(row.attempted, 40);

    let report = YieldReport { rows: vec![row] };
    let totals = report.totals();
    assert_eq!(totals.attempted, 40);
    assert_eq!(totals.accepted + totals.rejected_total(), totals.attempted);
    println!(
        "PASS: 10/10 clean trajectories accepted, 30/30 defects rejected with \
         their exact reasons, and the yield report reconciles at 40"
    );
}

// --- loss-mask contract ----------------------------------------------------

fn rand_trajectory(rng: &mut ChaCha8Rng, i: usize) -> Trajectory {
    let mut steps = Vec::new();
    for j in 0..rng.gen_range(1..=5) {
        let mut step = rand_step(rng);
        if step.action.tool_name == "get_answer" {
            step.action.tool_name.push('x');
        }
        steps.push(TrajectoryStep {
            step,
            observation: Observation::tool_result(format!(
                "Observation: result {j}: {}",
                rand_text_value(rng)
            )),
        });
    }
    steps.push(TrajectoryStep {
        step: AgentStep::new("Finish the session.", ToolCall::no_args("get_answer")),
        observation: Observation::tool_result("Observation: session complete. Response label: 0."),
    });
    Trajectory {
        id: format!("traj-mask-{i}"),
        input_id: format!("mask-{i}"),
        query: "Is the response accurate?".to_string(),
        response: "It depends.".to_string(),
        task_type: None,
        language: Language::English,
        initial_observation: Observation::initial(format!(
            "Observation: Query: {}",
            rand_text_value(rng)
        )),
        steps,
        final_label: Some(label(rng.gen_bool(0.5))),
    }
}

#[test]
fn exported_examples_train_exactly_the_agent_turns() {
    const SYSTEM: &str = "You verify responses sentence by sentence using tools.";
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for i in 0..100 {
        let trajectory = rand_trajectory(&mut rng, i);
        let example = export_finetune(&trajectory, SYSTEM).unwrap();

        // Masking: flagged set = serialized (thought, action) pairs;
        // unflagged set = system prompt plus every observation.
        for message in &example.messages {
            assert_eq!(message.train, message.role == Role::Agent);
        }
        let trained: Vec<&str> = example
            .messages
            .iter()
            .filter(|m| m.train)
            .map(|m| m.content.as_str())
            .collect();
        let serialized: Vec<String> = trajectory
            .steps
            .iter()
            .map(|s| serialize_step(&s.step))
            .collect();
        assert_eq!(
            trained,
            serialized.iter().map(String::as_str).collect::<Vec<_>>()
        );
        let untrained: Vec<&str> = example
            .messages
            .iter()
            .filter(|m| !m.train)
            .map(|m| m.content.as_str())
            .collect();
        let mut expected_untrained = vec![SYSTEM, trajectory.initial_observation.content.as_str()];
        expected_untrained.extend(
            trajectory
                .steps
                .iter()
                .map(|s| s.observation.content.as_str()),
        );
        assert_eq!(untrained, expected_untrained);

        // Reconstruction: the transcript parses back to the identical
        // interaction sequence, and re-exporting is byte-exact.
        let (initial, steps) = parse_transcript(&example).unwrap();
        assert_eq!(initial, trajectory.initial_observation);
        assert_eq!(steps, trajectory.steps);
        let rebuilt = Trajectory {
            initial_observation: initial,
            steps,
            ..trajectory.clone()
        };
        let re_exported = export_finetune(&rebuilt, SYSTEM).unwrap();
        assert_eq!(
            serde_json::to_string(&re_exported).unwrap(),
            serde_json::to_string(&example).unwrap()
        );
    }
    println!(
        "PASS: 100/100 exported examples train exactly the agent turns and \
         reconstruct their transcripts byte-for-byte"
    );
}

// --- runtime tool registration ---------------------------------------------

/// Days since 1970-01-01 for a proleptic Gregorian date; the classic
/// era-based civil-calendar formula, independent of any date library.
type CivilDate = (i64, i64, i64);

fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

#[test]
fn runtime_calendar_tool_answers_twenty_date_questions() {
    let spec = extensions::calendar_spec();
    assert_eq!(spec.examples.len(), 2, "calendar ships two usage examples");
    let mut toolbox = toolbox_with(FixtureSearchProvider::empty());
    let (spec, executor) = extensions::calendar_tool();
    toolbox.register(spec, executor).unwrap();
    assert!(toolbox
        .render_catalog()
        .contains("calendar(start_date: text, end_date: text)"));
    let engine = Engine::new(toolbox, EngineConfig::default());

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut dates: Vec<(CivilDate, CivilDate)> = vec![((2014, 2, 6), (2014, 5, 21))];
    while dates.len() < 20 {
        let mut pick = || {
            (
                rng.gen_range(1905i64..=2093),
                rng.gen_range(1i64..=12),
                rng.gen_range(1i64..=28),
            )
        };
        let (a, b) = (pick(), pick());
        let (start, end) = if days_from_civil(a.0, a.1, a.2) <= days_from_civil(b.0, b.1, b.2) {
            (a, b)
        } else {
            (b, a)
        };
        dates.push((start, end));
    }
    assert_eq!(
        days_from_civil(2014, 5, 21) - days_from_civil(2014, 2, 6),
        104
    );

    let mut used = 0usize;
    let mut labeled = 0usize;
    for (i, (start, end)) in dates.iter().enumerate() {
        let diff =
            days_from_civil(end.0, end.1, end.2) - days_from_civil(start.0, start.1, start.2);
        let gold = label(i % 2 == 1);
        let claim = if gold == Label::Clean {
            diff
        } else {
            let offset = loop {
                let o = rng.gen_range(-9i64..=9);
                if o != 0 {
                    break o;
                }
            };
            diff + offset
        };
        let iso = |(y, m, d): &CivilDate| format!("{y:04}-{m:02}-{d:02}");
        let (start_iso, end_iso) = (iso(start), iso(end));
        let input = DetectionInput::new(
            format!("cal-{i}"),
            format!("How many days are there between {start_iso} and {end_iso}?"),
            format!("There are {claim} days between {start_iso} and {end_iso}."),
        )
        .with_gold_label(gold);
        let turns = vec![
            turn(
                "Count the days with the calendar tool.",
                "calendar",
                serde_json::json!({"start_date": start_iso, "end_date": end_iso}),
            ),
            turn(
                "Compare the counted days with the stated number.",
                "record_verdict",
                serde_json::json!({
                    "label": gold.as_u8(),
                    "evidence": format!("the calendar counts {diff} days, the response states {claim}")
                }),
            ),
            turn("Done.", "get_answer", serde_json::json!({})),
        ];
        let outcome = engine
            .run(&input, &ScriptedBackend::new(turns))
            .unwrap_or_else(|e| panic!("cal-{i} failed: {e}"));

        let calendar_steps: Vec<&TrajectoryStep> = outcome
            .trajectory
            .steps
            .iter()
            .filter(|s| s.step.action.tool_name == "calendar")
            .collect();
        assert_eq!(calendar_steps.len(), 1, "cal-{i} must invoke calendar once");
        assert_eq!(
            calendar_steps[0].observation.content,
            format!("Observation: days between = {diff}"),
            "cal-{i}: registered tool disagrees with the civil-calendar oracle"
        );
        used += 1;
        assert_eq!(outcome.report.verdicts[0].tool_used, "calendar");
        assert_eq!(outcome.report.response_label, gold, "cal-{i}");
        labeled += 1;
    }
    assert_eq!((used, labeled), (20, 20));
    println!(
        "PASS: the runtime-registered calendar tool is used in 20/20 sessions \
         (2014-02-06 to 2014-05-21 = 104 days) with 20/20 correct labels"
    );
}

// --- reflection propagation --------------------------------------------------

#[test]
fn reflection_relabels_a_sentence_built_on_a_wrong_result() {
    let engine = engine_with(FixtureSearchProvider::empty());
    let input = DetectionInput::new(
        "prop-1",
        "The trip covers 140 km in legs of 3, 0.5, and 1.5 hours. What is the average speed?",
        "The total is 3 + 0.5 + 1.5 = 4. The average speed is 140 / 4 = 35.",
    )
    .with_task_type(TaskType::MathSolving);
    let outcome = engine.run_fallback(&input).unwrap();
    let report = outcome.report;

    // Two sentences in, two verdicts out: reflection edits memory in
    // place, it never grows or shrinks it.
    assert_eq!(report.verdicts.len(), 2);
    assert_eq!(report.response_label, Label::Hallucinated);
    assert_eq!(report.verdicts[0].label, Label::Hallucinated);
    assert_eq!(report.verdicts[1].label, Label::Hallucinated);
    assert!(report.verdicts[1]
        .evidence
        .contains("depends on the incorrect result of sentence 1"));

    // The second sentence was locally consistent before reflection: its
    // recorded verdict was clean and only update_memory flipped it.
    let verdict_labels: Vec<i64> = outcome
        .trajectory
        .steps
        .iter()
        .filter(|s| s.step.action.tool_name == "record_verdict")
        .map(|s| s.step.action.arg_int("label").unwrap())
        .collect();
    assert_eq!(verdict_labels, [1, 0]);
    let updates: Vec<&TrajectoryStep> = outcome
        .trajectory
        .steps
        .iter()
        .filter(|s| s.step.action.tool_name == "update_memory")
        .collect();
    assert_eq!(updates.len(), 1);
    assert_eq!(updates[0].step.action.arg_int("index"), Some(2));
    assert_eq!(updates[0].step.action.arg_int("label"), Some(1));
    assert_eq!(
        updates[0].observation.content,
        "Observation: memory updated for sentence 2: label=1."
    );
    println!(
        "PASS: reflection relabels the dependent sentence to 1 with dependency \
         evidence while the memory size stays at 2"
    );
}
