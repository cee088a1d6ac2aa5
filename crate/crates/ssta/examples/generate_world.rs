//! Build a preset world, step it, render a view as ASCII art, and write
//! a dataset directory.
//!
//! ```bash
//! cargo run --example generate_world
//! ```

use ssta::world::{build_topology, preset, render, step_world, Dataset, WorldState};

fn ascii(frame: &ssta::world::Frame) -> String {
    let (h, w) = (frame.grid.shape()[0], frame.grid.shape()[1]);
    let mut out = String::new();
    for y in 0..h {
        for x in 0..w {
            let v = frame.grid.data()[y * w + x];
            out.push(if v >= 1.0 {
                '#'
            } else if v > 0.0 {
                '.'
            } else {
                ' '
            });
        }
        out.push('\n');
    }
    out
}

fn main() -> anyhow::Result<()> {
    let cfg = preset(8, 42)?;
    println!(
        "8-view world: {}x{} grid, {} vehicles, {} spawn points",
        cfg.grid.0,
        cfg.grid.1,
        cfg.vehicles,
        cfg.spawns.len()
    );

    let topology = build_topology(&cfg.views, 2)?;
    for view in &cfg.views {
        println!(
            "view {} at {:?} listens to {:?}, heard by {:?}",
            view.id,
            view.center(),
            topology.listen_set(view.id),
            topology.receivers_of(view.id)
        );
    }

    let (mut state, mut rng) = WorldState::from_config(&cfg)?;
    for _ in 0..25 {
        step_world(&mut state, &mut rng)?;
    }
    println!("\nview 2 after 25 steps ('#' vehicle, '.' road):");
    print!("{}", ascii(&render(&state, &cfg.views[1])));

    let dir = std::env::temp_dir().join("ssta_example_dataset");
    ssta::world::generate_dataset(&cfg, 60, 30, &dir)?;
    let loaded = Dataset::load(&dir)?;
    println!("\ndataset with {} steps per view written to {}", loaded.steps, dir.display());
    Ok(())
}
