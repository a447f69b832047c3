//! Layered run settings: defaults, then a `key = value` file, then
//! individual overrides.

use dfcr::settings::{parse_config, Settings};

fn main() -> dfcr::Result<()> {
    let dir = std::env::temp_dir().join("dfcr-settings-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "# narrow model, deformable layers 3 and 5\nconv_widths = 8,16,24,24,32,32,32\ndeformable_set = 3,5\nlearning_rate = 0.01\nseed = 4\n",
    )?;
    let mut s = parse_config(&path, Settings::default())?;
    s.apply("steps", "500")?;
    print!("{}", s.to_text());

    std::fs::write(&path, "hidden = 32\ndeformable_set = 2,5\n")?;
    match parse_config(&path, Settings::default()) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
