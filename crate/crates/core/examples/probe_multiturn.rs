//! Diagnostic: test-time multi-turn solve rates by turn budget on the test
//! split of the configured dataset.
//!
//! Usage: probe_multiturn <checkpoint.mfrl> <dataset_n> <dataset_seed> <max_turns>

use mulferl_core::checkpoint::load_params;
use mulferl_core::env::generate_dataset;
use mulferl_core::feedback::{Simulator, SimulatorConfig};
use mulferl_core::trainer::infer_multiturn;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (vocab, params) = load_params(args[1].as_ref()).unwrap();
    let n: usize = args[2].parse().unwrap();
    let seed: u64 = args[3].parse().unwrap();
    let max_turns: usize = args[4].parse().unwrap();
    let dataset = generate_dataset(n, seed, &vocab).unwrap();
    let simulator = Simulator::new(SimulatorConfig::scripted(2), vocab.clone()).unwrap();

    let total = dataset.test.len();
    let mut solved_by_turn = vec![0usize; max_turns];
    for p in &dataset.test {
        let t = infer_multiturn(p, &params, &simulator, max_turns, 64, 24, &vocab).unwrap();
        if t.verified {
            for k in (t.turns_used - 1)..max_turns {
                solved_by_turn[k] += 1;
            }
        }
    }
    for (k, s) in solved_by_turn.iter().enumerate() {
        println!(
            "solve rate after turn {}: {:.4} ({}/{})",
            k + 1,
            *s as f64 / total as f64,
            s,
            total
        );
    }
}
