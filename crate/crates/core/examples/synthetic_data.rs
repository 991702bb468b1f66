//! Synthetic scenes: a human disc, coloured objects, relations from geometry.

use iwin::harness::data::{generate, GenConfig, RELATIONS};

fn main() -> iwin::Result<()> {
    let cfg = GenConfig {
        height: 64,
        width: 64,
        num_object_classes: 8,
        num_interaction_classes: 4,
    };
    let scenes = generate(0, 200, &cfg)?;
    let mut counts = [0usize; 4];
    for s in &scenes {
        for g in &s.instances {
            counts[g.interaction_class] += 1;
        }
    }
    for (name, n) in RELATIONS.iter().zip(counts) {
        println!("{name:10} {n}");
    }
    let s = &scenes[0];
    println!("scene 0: human {:?}", s.layout.human.bbox);
    for g in &s.instances {
        println!(
            "  object {} {} box {:.3?}",
            g.object_class, RELATIONS[g.interaction_class], g.object_box
        );
    }
    Ok(())
}
