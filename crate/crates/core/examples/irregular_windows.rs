//! Regular versus offset window partitions of a small map.

use iwin::windowing::{gather_windows, partition, OffsetField};
use iwin::FeatureMap;

fn main() -> iwin::Result<()> {
    let z = FeatureMap::from_fn(1, 5, 5, |_, y, x| (10 * y + x) as f64);
    let regular = partition(&z, None, 2)?;
    println!(
        "5×5 map, S=2: {} windows, padding {:?}",
        regular.num_windows(),
        regular.pad_spec
    );

    let offsets = OffsetField::from_fn(5, 5, |y, x| (0.25 * (x % 2) as f64, -0.5 * (y % 2) as f64));
    let irregular = partition(&z, Some(&offsets), 2)?;
    let values = gather_windows(&z, &irregular)?;
    for (w, pts) in irregular.windows.iter().enumerate().take(3) {
        let coords: Vec<String> = pts.iter().map(|p| format!("({:.2}, {:.2})", p.x, p.y)).collect();
        let v: Vec<String> = values.data()[w * 4..w * 4 + 4].iter().map(|v| format!("{v:.2}")).collect();
        println!("window {w}: points {} values {}", coords.join(" "), v.join(" "));
    }
    Ok(())
}
