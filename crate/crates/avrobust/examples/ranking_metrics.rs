//! Average precision, ROC AUC and d-prime on hand-made scores.

use avrobust::metrics::{average_precision, d_prime, roc_auc, EvalReport, ReportMeta, ScoreMatrix};
use avrobust::diffengine::Tensor;

fn main() -> avrobust::Result<()> {
    let scores = [0.9, 0.8, 0.7, 0.6, 0.55, 0.4, 0.3, 0.1];
    let labels = [true, false, true, true, false, false, true, false];
    let auc = roc_auc(&scores, &labels).unwrap();
    println!("AP {:.4}", average_precision(&scores, &labels).unwrap());
    println!("AUC {auc:.4}  d' {:.4}", d_prime(auc));
    for a in [0.5, 0.75, 0.9, 0.99] {
        println!("d'({a}) = {:.3}", d_prime(a));
    }

    // Per-class report over a 4 x 2 score matrix; class 1 has no positives.
    let s = Tensor::new(&[4, 2], vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.3, 0.1, 0.5])?;
    let y = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])?;
    let report = EvalReport::from_scores(
        &ScoreMatrix::new(s, y)?,
        &["dog".into(), "siren".into()],
        ReportMeta::clean("none", 0),
    )?;
    println!("{}", report.to_json()?);
    Ok(())
}
