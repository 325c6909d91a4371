//! Diagnostic: where does a trained checkpoint's knowledge live?
//! Reports greedy solve rates with and without injected feedback, plus the
//! answer-slot logit decomposition aggregated over the validation split.
//!
//! Usage: probe_transfer <checkpoint.mfrl> <dataset_n> <dataset_seed>

use mulferl_core::checkpoint::load_params;
use mulferl_core::env::generate_dataset;
use mulferl_core::feedback::scripted_feedback;
use mulferl_core::policy::{context_bias, greedy_rollout, Context};
use mulferl_core::schema::{build_regeneration_context, parse_response, verify};
use mulferl_core::trainer::evaluate;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (vocab, params) = load_params(args[1].as_ref()).unwrap();
    let n: usize = args[2].parse().unwrap();
    let seed: u64 = args[3].parse().unwrap();
    let dataset = generate_dataset(n, seed, &vocab).unwrap();

    let plain = evaluate(&params, &dataset.validation, &vocab, 64);
    println!(
        "unhinted greedy: {:.4} (format {:.4})",
        plain.solve_rate, plain.format_rate
    );

    let mut solved = 0;
    for p in &dataset.validation {
        let fb = scripted_feedback(p, &vocab);
        let regen = build_regeneration_context(p, &fb, 16, &vocab).unwrap();
        let r = greedy_rollout(&params, &regen.ctx, Some(&regen.forced_prefix), 64, &vocab);
        let out = verify(p, &parse_response(&r.tokens, &vocab));
        solved += out.reward as usize;
    }
    println!(
        "hinted greedy:   {:.4}",
        solved as f64 / dataset.validation.len() as f64
    );

    // Mean absolute contribution of each table to the answer-slot logits.
    let mut trans_spread = 0.0;
    let mut prompt_spread = 0.0;
    let mut hint_spread = 0.0;
    let box_row = vocab.box_marker();
    let digits: Vec<usize> = (0..10).map(|d| vocab.digit(d).unwrap()).collect();
    let spread = |v: &[f64]| {
        let vals: Vec<f64> = digits.iter().map(|&d| v[d]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|x| (x - m).abs()).sum::<f64>() / vals.len() as f64
    };
    for p in &dataset.validation {
        trans_spread += spread(params.w_trans.row(box_row));
        let ctx = Context::initial(p.prompt_tokens.clone());
        prompt_spread += spread(&context_bias(&params, &ctx));
        let hint_tok = mulferl_core::env::hint(p, &vocab);
        hint_spread += spread(params.w_ctx.row(hint_tok));
    }
    let n = dataset.validation.len() as f64;
    println!(
        "answer-slot digit spread: trans {:.3}  prompt-bag {:.3}  hint-row {:.3}",
        trans_spread / n,
        prompt_spread / n,
        hint_spread / n
    );
}
