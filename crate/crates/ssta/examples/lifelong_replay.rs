//! Replay-buffer strategies on a stream: sliding window keeps the last D
//! samples, interesting data keeps samples whose gradient norm beats the
//! running mean of every norm seen so far.
//!
//! ```bash
//! cargo run --example lifelong_replay
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssta::lifelong::{EvictionPolicy, ReplayBuffer};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let mut sw: ReplayBuffer<usize> = ReplayBuffer::new(5, EvictionPolicy::Fifo);
    let mut id: ReplayBuffer<usize> = ReplayBuffer::new(5, EvictionPolicy::SmallestNorm);

    println!("{:>4} {:>8} {:>9} {:>22} {:>26}", "t", "norm", "mean", "sliding window", "interesting data");
    for t in 0..18 {
        // A stream with occasional interesting bursts.
        let norm: f64 = if t % 5 == 3 { rng.gen_range(4.0..8.0) } else { rng.gen_range(0.2..1.5) };
        sw.sw_offer(t);
        let stored = id.id_offer(t, norm).unwrap();
        let sw_held: Vec<usize> = sw.entries().map(|e| e.sample).collect();
        let id_held: Vec<usize> = id.entries().map(|e| e.sample).collect();
        println!(
            "{t:>4} {norm:>8.2} {:>9.3} {:>22} {:>23}{}",
            id.running_mean(),
            format!("{sw_held:?}"),
            format!("{id_held:?}"),
            if stored { " ←" } else { "" },
        );
    }

    println!("\nbatches always include the newest stored sample:");
    let mut draw_rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let batch = sw.draw_batch(3, &mut draw_rng).unwrap();
        println!("  drew {:?}", batch);
    }
}
