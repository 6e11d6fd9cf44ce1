//! Pearson and concordance correlation on hand-made predictions, and the
//! per-category mean PCC used for evaluation.

use eri_core::autodiff::{Graph, Tensor};
use eri_core::metrics::{ccc, correlation_loss, evaluate_mean_pcc, pcc, LossKind, NUM_CATEGORIES};
use eri_core::Result;

fn main() -> Result<()> {
    let target = [0.1, 0.4, 0.35, 0.8, 0.6, 0.2];
    let cases: [(&str, [f64; 6]); 4] = [
        ("exact", target),
        ("shifted +0.2", target.map(|v| v + 0.2)),
        ("scaled x2", target.map(|v| 2.0 * v)),
        ("reversed", target.map(|v| 1.0 - v)),
    ];
    println!("{:<14} {:>8} {:>8}", "prediction", "pcc", "ccc");
    for (name, pred) in &cases {
        println!("{name:<14} {:>8.4} {:>8.4}", pcc(pred, &target)?, ccc(pred, &target)?);
    }

    let rows: Vec<[f64; NUM_CATEGORIES]> = (0..6)
        .map(|i| std::array::from_fn(|c| target[(i + c) % 6]))
        .collect();
    let noisy: Vec<[f64; NUM_CATEGORIES]> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.map(|v| v + if i % 2 == 0 { 0.05 } else { -0.05 }))
        .collect();
    print!("{}", evaluate_mean_pcc(&noisy, &rows)?);

    let flat = |t: &[[f64; NUM_CATEGORIES]]| Tensor::from_vec([t.len(), NUM_CATEGORIES], t.concat());
    let (p, t) = (flat(&noisy)?, flat(&rows)?);
    for kind in [LossKind::Pcc, LossKind::Ccc] {
        let mut g = Graph::no_grad();
        let (pv, tv) = (g.constant(&p), g.constant(&t));
        let loss = correlation_loss(&mut g, kind, pv, tv)?;
        println!("{kind} loss {:.6}", g.item(loss));
    }
    Ok(())
}
