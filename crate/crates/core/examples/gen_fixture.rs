//! Writes the synthetic two-model, two-GPU-type scenario used by the tests.
//!
//! Usage: cargo run -p hetserve-core --example gen_fixture -- <out-dir>

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde_json::json;

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "crates/core/fixtures".into());
    std::fs::create_dir_all(&out).unwrap();

    let spec = json!({
        "gpus": [
            {"name": "h100", "unit_cost_per_hour": 2.69, "tflops": 400.0, "hbm_bw": 2000.0,
             "mem_gb": 80.0, "max_tp": 8, "count": 12, "interconnect_bw": 450.0},
            {"name": "rtx5090", "unit_cost_per_hour": 0.89, "tflops": 160.0, "hbm_bw": 1500.0,
             "mem_gb": 32.0, "max_tp": 4, "count": 16, "interconnect_bw": 64.0}
        ],
        "models": [
            {"name": "small", "weight_bytes": 16.0e9, "flops_per_token": 16.0e9,
             "kv_bytes_per_token": 131072.0, "n_layers": 32, "activation_bytes_per_token": 8192.0},
            {"name": "large", "weight_bytes": 70.0e9, "flops_per_token": 140.0e9,
             "kv_bytes_per_token": 327680.0, "n_layers": 80, "activation_bytes_per_token": 16384.0}
        ],
        "coeffs": [
            {"tp_speedup": {"1": 1.0, "2": 0.9, "4": 0.8, "8": 0.7},
             "pp_comm_alpha": 0.002, "pp_comm_beta": 25.0}
        ]
    });
    std::fs::write(format!("{out}/cluster.json"), serde_json::to_string_pretty(&spec).unwrap() + "\n").unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let score = Normal::new(0.5, 0.08).unwrap();
    let mut t = 0.0;
    let mut text = String::new();
    for i in 0..400 {
        t += Distribution::<f64>::sample(&Exp1, &mut rng);
        let s: f64 = f64::clamp(score.sample(&mut rng), 0.01, 0.99);
        let input: u32 = rng.random_range(200..=1800);
        let output: u32 = rng.random_range(32..=96);
        let p_small = (1.05 - s).clamp(0.0, 1.0);
        let p_large = 0.95 - 0.05 * s;
        let small = if rng.random::<f64>() < p_small { 1.0 } else { 0.0 };
        let large = if rng.random::<f64>() < p_large { 1.0 } else { 0.0 };
        let rec = json!({
            "id": format!("q{i:04}"),
            "arrival_s": (t * 1e6_f64).round() / 1e6,
            "input_tokens": input,
            "output_tokens": output,
            "routing_score": (s * 1e6_f64).round() / 1e6,
            "quality": {"small": small, "large": large}
        });
        writeln!(text, "{rec}").unwrap();
    }
    std::fs::write(format!("{out}/trace.jsonl"), text).unwrap();
}
