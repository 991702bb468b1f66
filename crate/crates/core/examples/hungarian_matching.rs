//! Bipartite matching of ground truths to queries under the pair cost.

use iwin::matching::{hungarian, set_loss, CostMatrix, GroundTruthInstance, HoiPrediction, LossWeights};

fn main() -> iwin::Result<()> {
    let cost = CostMatrix::new(3, 2, vec![4.0, 1.0, 2.0, 0.5, 3.0, 3.0])?;
    let a = hungarian(&cost)?;
    println!("assignment {:?}, total {}", a.gt_to_pred, a.total(&cost));

    let gt = GroundTruthInstance {
        human_box: [0.3, 0.4, 0.2, 0.3],
        object_box: [0.6, 0.5, 0.2, 0.2],
        object_class: 1,
        interaction_class: 0,
    };
    let guess = |shift: f64, obj: usize| HoiPrediction {
        human_box: [0.3 + shift, 0.4, 0.2, 0.3],
        object_box: [0.6 + shift, 0.5, 0.2, 0.2],
        human_logits: vec![3.0, 0.0],
        object_logits: (0..4).map(|i| if i == obj { 3.0 } else { 0.0 }).collect(),
        interaction_logits: vec![3.0, 0.0, 0.0],
    };
    let preds = [guess(0.2, 0), guess(0.0, 1), guess(0.1, 1)];
    let w = LossWeights::default();
    println!("set loss {:.4}", set_loss(&preds, &[gt], &w)?);
    Ok(())
}
