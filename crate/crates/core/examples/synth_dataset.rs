//! Render a handful of regular, curved and tilted samples and write them as
//! a dataset directory (`manifest.tsv` plus PGM images).
//!
//! `cargo run --release --example synth_dataset -- /tmp/dfcr-data`

use dfcr::data::{generate_dataset, render_sample, DatasetSpec, Distortion};

fn main() -> dfcr::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth-data".into());
    let spec = DatasetSpec { regular: 4, curved: 4, tilted: 4, length: (3, 8), seed: 7, ..Default::default() };
    let manifest = generate_dataset(&spec, out.as_ref())?;
    for r in &manifest.records {
        println!("{:<22} {:<9} {}", r.path, r.label, r.tag);
    }

    for d in Distortion::ALL {
        let s = render_sample("31415", d, 11, (200, 64))?;
        let p = &s.params;
        println!(
            "{d:<8} scale {} angle {:+.1} amplitude {:.1} period {:.0} ink {:.2} background {:.2}",
            p.scale, p.angle_deg, p.amplitude, p.period, p.ink, p.background
        );
    }
    Ok(())
}
