//! Macro-averaged metrics and the confusion matrix.

use pcpl::eval::evaluate;

fn main() -> pcpl::Result<()> {
    let report = evaluate(&[0, 0, 1, 1], &[0, 1, 1, 1], 2)?;
    for c in &report.per_class {
        println!(
            "class {}: precision {:.3} recall {:.3} f1 {:.3} support {}",
            c.class, c.precision, c.recall, c.f1, c.support
        );
    }
    println!(
        "accuracy {:.3}  mRecall {:.3}  mPrecision {:.3}  mF1 {:.4}",
        report.accuracy, report.mrecall, report.mprecision, report.mf1
    );
    println!("confusion {:?}", report.confusion);
    println!("row-normalized {:?}", report.confusion_row_normalized);
    Ok(())
}
