use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stroke_core::data::StrokeClass;
use stroke_core::evaluate::{confusion_matrix, metrics_from_cm, render_report, EvalReport, ReportFormat, Scores};
use stroke_core::train::Prediction;

/// Per-sample recount of one-vs-rest precision/recall/F1, written without
/// a confusion matrix.
fn oracle(preds: &[usize], labels: &[usize]) -> (f64, [Scores; 3], Scores) {
    let n = preds.len() as f64;
    let acc = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n;
    let mut per = [Scores::default(); 3];
    for k in 0..3 {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for i in 0..preds.len() {
            match (preds[i] == k, labels[i] == k) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        per[k] = Scores { precision: p, recall: r, f1: f };
    }
    let mac = Scores {
        precision: per.iter().map(|s| s.precision).sum::<f64>() / 3.0,
        recall: per.iter().map(|s| s.recall).sum::<f64>() / 3.0,
        f1: per.iter().map(|s| s.f1).sum::<f64>() / 3.0,
    };
    (acc, per, mac)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn thousand_random_sets_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = std::time::Instant::now();
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let m = metrics_from_cm(&confusion_matrix(&preds, &labels).unwrap()).unwrap();
        let (acc, per, mac) = oracle(&preds, &labels);
        assert!(close(m.accuracy, acc));
        for c in StrokeClass::ALL {
            let s = m.per_class[c.dir_name()];
            let o = per[c.id()];
            assert!(close(s.precision, o.precision) && close(s.recall, o.recall) && close(s.f1, o.f1));
        }
        assert!(close(m.macro_avg.f1, mac.f1));
        assert!(close(m.macro_avg.recall, mac.recall));
        assert!(close(m.macro_avg.precision, mac.precision));
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

fn labelled() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..60).prop_flat_map(|n| (prop::collection::vec(0usize..3, n), prop::collection::vec(0usize..3, n)))
}

proptest! {
    #[test]
    fn micro_scores_equal_accuracy((preds, labels) in labelled()) {
        let m = metrics_from_cm(&confusion_matrix(&preds, &labels).unwrap()).unwrap();
        prop_assert!(close(m.micro.precision, m.accuracy));
        prop_assert!(close(m.micro.recall, m.accuracy));
        prop_assert!(close(m.micro.f1, m.accuracy));
    }

    #[test]
    fn sample_order_is_irrelevant((preds, labels) in labelled(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..preds.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let a = confusion_matrix(&preds, &labels).unwrap();
        let b = confusion_matrix(&p2, &l2).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(metrics_from_cm(&a).unwrap(), metrics_from_cm(&b).unwrap());
    }

    #[test]
    fn counts_cover_all_samples((preds, labels) in labelled()) {
        let cm = confusion_matrix(&preds, &labels).unwrap();
        prop_assert_eq!(cm.total() as usize, preds.len());
        for k in 0..3 {
            let row: u64 = cm.counts[k].iter().sum();
            prop_assert_eq!(row as usize, labels.iter().filter(|&&l| l == k).count());
        }
    }
}

fn prediction(label: StrokeClass, predicted: StrokeClass) -> Prediction {
    let mut probabilities: Vec<f64> = vec![0.1; 3];
    probabilities[predicted.id()] = 0.8;
    let logits = probabilities.iter().map(|p| p.ln()).collect();
    Prediction {
        label,
        predicted,
        probabilities,
        logits,
    }
}

fn report_with_accuracy(correct: usize, total: usize) -> EvalReport {
    let preds: Vec<Prediction> = (0..total)
        .map(|i| {
            let label = StrokeClass::ALL[i % 3];
            let predicted = if i < correct { label } else { StrokeClass::ALL[(i + 1) % 3] };
            prediction(label, predicted)
        })
        .collect();
    EvalReport::from_predictions("MaxViT", "cgan", &preds, 0.1073).unwrap()
}

#[test]
fn table_uses_mixed_precision() {
    let r = report_with_accuracy(49, 50);
    assert!((r.accuracy() - 0.98).abs() < 1e-12);
    let table = render_report(&[r.clone()], ReportFormat::Table).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    for col in ["Accuracy", "Loss Value", "F1-score", "Recall", "Precision"] {
        assert!(lines[0].contains(col), "missing column {col}");
    }
    let cells: Vec<&str> = lines[2].split('|').map(str::trim).filter(|s| !s.is_empty()).collect();
    assert_eq!(cells[..4], ["MaxViT", "cgan", "0.9800", "0.1073"]);
    for c in &cells[4..] {
        assert_eq!(c.split('.').nth(1).map(str::len), Some(2), "cell {c}");
    }
    let three = render_report(&[r.clone(), r.clone(), r], ReportFormat::Table).unwrap();
    assert_eq!(three.lines().count(), 5);
}

#[test]
fn metrics_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let r = report_with_accuracy(37, 45);
    let path = dir.path().join("metrics.json");
    r.write_json(&path).unwrap();
    assert_eq!(EvalReport::read_json(&path).unwrap(), r);
    let text = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["per_class"]["ischemic"]["f1"].is_number());
    assert!(v["macro"]["recall"].is_number());
    let json = render_report(&[r], ReportFormat::Json).unwrap();
    assert!(json.contains("per_class"));
}

#[test]
fn confusion_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cm = confusion_matrix(&[0, 1, 1, 1, 2, 0], &[0, 0, 1, 1, 2, 2]).unwrap();
    let p = dir.path().join("cm.csv");
    cm.write_csv(&p).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert_eq!(
        text,
        "true\\predicted,normal,hemorrhagic,ischemic\nnormal,1,1,0\nhemorrhagic,0,2,0\nischemic,1,0,1\n"
    );
}
