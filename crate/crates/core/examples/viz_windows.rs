//! Ancestor sample points of every final token, written as JSON and PPM.

use iwin::harness::data::generate;
use iwin::harness::viz::{viz_windows, write_ppm};
use iwin::model::{Model, ModelConfig};

fn main() -> iwin::Result<()> {
    let model = Model::new(ModelConfig::iwin_s(), 0)?;
    let scene = generate(3, 1, &iwin::harness::config::RunConfig::default().gen_config())?.remove(0);
    let trace = viz_windows(&model, &scene.image)?;
    for t in &trace.tokens {
        println!("token {:?} at {:?}: {} ancestors", t.grid, t.location, t.ancestors.len());
    }
    let dir = std::env::temp_dir();
    std::fs::write(
        dir.join("iwin_trace.json"),
        serde_json::to_string_pretty(&trace).expect("serialisable"),
    )?;
    write_ppm(dir.join("iwin_trace.ppm"), &scene.image, &trace, 4)?;
    println!("wrote {}", dir.join("iwin_trace.{json,ppm}").display());
    Ok(())
}
