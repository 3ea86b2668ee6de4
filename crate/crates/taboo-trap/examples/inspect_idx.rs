//! Dumps IDX file headers and dataset statistics, and renders one digit as
//! ASCII art — a smoke test for the data pipeline.
//!
//! ```text
//! cargo run --release --example inspect_idx -- [data_dir]
//! ```

use std::path::PathBuf;

use taboo_trap::data::{Dataset, Split};

fn main() -> taboo_trap::Result<()> {
    let data_dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "data/mnist".into()),
    );
    for split in [Split::Train, Split::Test] {
        let ds = Dataset::load_dir(&data_dir, split)?;
        let (min, max) = ds
            .images
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        println!(
            "{:?}: {} samples, pixel range [{min}, {max}], first labels {:?}",
            split,
            ds.len(),
            &ds.labels[..8]
        );
    }

    let ds = Dataset::load_dir(&data_dir, Split::Test)?;
    println!("\nsample 0 (label {}):", ds.labels[0]);
    let img = ds.images.slice_first_axis(0);
    for row in 0..28 {
        let line: String = (0..28)
            .map(|col| {
                let v = img.data()[row * 28 + col];
                match (v * 4.0) as u32 {
                    0 => ' ',
                    1 => '.',
                    2 => 'o',
                    _ => '#',
                }
            })
            .collect();
        println!("{line}");
    }
    Ok(())
}
