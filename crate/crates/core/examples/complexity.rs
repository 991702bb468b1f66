//! Attention cost by formula and by counted multiply-accumulates.

use iwin::attention::{complexity, AttentionKind};

fn main() -> iwin::Result<()> {
    println!("kind\tH\tW\tformula\tmeasured\tattention");
    for (h, w) in [(8, 8), (8, 16), (16, 16), (16, 32)] {
        for kind in [AttentionKind::Global, AttentionKind::Window] {
            let r = complexity(kind, h, w, 8, 4)?;
            println!(
                "{kind:?}\t{h}\t{w}\t{}\t{}\t{}",
                r.formula_flops, r.measured_macs, r.attention_macs
            );
        }
    }
    Ok(())
}
