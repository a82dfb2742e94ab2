//! Scratch probe for fixture tuning. Prints per-window deltas.

use prelora_core::config::RunConfig;
use prelora_core::trainer::run;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let bs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(100);
    let epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(60);
    let mode: String = args.get(5).cloned().unwrap_or_else(|| "prelora".into());
    let tokens: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(4);
    let r_min: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(8);
    let r_max: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(64);
    let w: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(10);
    let text = format!(r#"
[model]
num_layers = 4
hidden_dim = 64
num_heads = 4
mlp_dim = 256
num_classes = 10
input_dim = 64
num_tokens = {tokens}
seed = 42

[data]
kind = "synthetic"
num_examples = {n}
input_dim = 64
num_classes = 10
seed = 7

[optimizer]
learning_rate = {lr}
batch_size = {bs}

[gate]
k = 3
m = 3
tau = 0.5
zeta = 2.5

[warmup]
epochs = {w}

[ranks]
r_min = {r_min}
r_max = {r_max}

[run]
total_epochs = {epochs}
seed = 1234
mode = "{mode}"
"#);
    let config = RunConfig::from_toml_str(&text).unwrap();
    let t0 = std::time::Instant::now();
    let report = run(&config).unwrap();
    println!("total wall: {:.1}s (run time {:.1}s)", report.aggregates.total_wall_seconds, t0.elapsed().as_secs_f64());
    for w in &report.windows {
        let max_dw = w.module_deltas_pct.as_ref().map(|m| m.values().fold(0.0f64, |a, d| a.max(d.abs())));
        println!(
            "win {:2} (ep {:2}-{:2}) loss {:.4} dL {:+.3}% max|dW| {}",
            w.index, w.epoch_start, w.epoch_end, w.loss,
            w.loss_delta_pct.unwrap_or(f64::NAN),
            max_dw.map(|v| format!("{v:.3}%")).unwrap_or_default()
        );
    }
    println!("switch: {:?}", report.switch.gate_pass_epoch);
    println!("freeze: {:?}", report.switch.freeze_epoch);
    if let Some(plan) = &report.switch.rank_plan {
        let ranks: Vec<String> = plan.iter().map(|(a, r)| format!("{a}={r}")).collect();
        println!("plan: {}", ranks.join(" "));
    }
    let agg = &report.aggregates;
    println!(
        "mean epoch s: full {:?} warmup {:?} lora {:?} speedup {:?}",
        agg.mean_epoch_seconds_full, agg.mean_epoch_seconds_warmup,
        agg.mean_epoch_seconds_lora_only, agg.speedup_full_over_lora
    );
    let ep = &report.epochs;
    for r in ep.iter().take(3) { println!("ep {:2} {:9} loss {:.4} acc {:.3} wall {:.3}s", r.epoch, r.phase.to_string(), r.loss, r.train_accuracy, r.wall_seconds); }
    for r in ep.iter().rev().take(3).collect::<Vec<_>>().iter().rev() { println!("ep {:2} {:9} loss {:.4} acc {:.3} wall {:.3}s", r.epoch, r.phase.to_string(), r.loss, r.train_accuracy, r.wall_seconds); }
    if let Some(freeze) = report.switch.freeze_epoch {
        let freeze_loss = ep[freeze].loss;
        let final_loss = ep.last().unwrap().loss;
        println!("freeze loss {:.4} final loss {:.4} (improved: {})", freeze_loss, final_loss, final_loss < freeze_loss);
    }
}
