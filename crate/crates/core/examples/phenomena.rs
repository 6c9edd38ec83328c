//! Trains the four-model grid and prints the headline diagnostics.
//!
//! `cargo run --release --example phenomena -- <steps> <peak_lr> [batch] [seq]`

use outlierlab::harness::{evaluate, synthetic_corpus, Corpus, RunConfig, Trainer};
use outlierlab::quant::{quantize_model, QuantPreset};

fn main() -> outlierlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map_or(500, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(1e-3, |s| s.parse().unwrap());
    let batch: usize = args.get(3).map_or(8, |s| s.parse().unwrap());
    let seq: usize = args.get(4).map_or(64, |s| s.parse().unwrap());
    let corpus = Corpus::from_bytes(&synthetic_corpus(1 << 20, 0), seq)?;
    for (opt, attn) in [
        ("adam", "softmax"),
        ("adam", "softmax1"),
        ("orthoadam", "softmax"),
        ("orthoadam", "softmax1"),
    ] {
        let mut cfg = RunConfig::parse_str(&format!(
            "model.norm=rmsnorm_single\nmodel.use_biases=false\nmodel.max_seq_len={seq}\nseq_len={seq}\nbatch_size={batch}\n\
             optimizer.kind={opt}\noptimizer.backend=hadamard\nmodel.attention={attn}\n\
             schedule.total_steps={steps}\nschedule.warmup_steps={}\neval_interval=0\neval_windows=64",
            steps / 10
        ))?;
        cfg.schedule.peak_lr = lr;
        let t0 = std::time::Instant::now();
        let mut t = Trainer::new(cfg.clone(), corpus.clone())?;
        t.run_to(steps, |_| Ok(()))?;
        let r = t.evaluate()?;
        let q = quantize_model(t.model(), QuantPreset::W4)?;
        let w4 = evaluate(&q.model, &corpus.valid, seq, 64, None)?.ppl;
        println!(
            "{opt:9} {attn:8} loss {:.3} ppl {:.3} k_first {:.2} k_rest {:.2} maxabs {:.2}/{:.2} first_attn {:.3} share {:.3} w4 {:.3} (+{:.3})  [{:.0}s]",
            t.metrics().last().unwrap().train_loss,
            r.ppl,
            r.hidden.mean_kappa_first().unwrap_or(f64::NAN),
            r.hidden.mean_kappa_rest().unwrap_or(f64::NAN),
            r.hidden.mean_max_abs_first(),
            r.hidden.mean_max_abs_rest(),
            r.attention.pct_first_argmax,
            r.attention.share_first,
            w4,
            w4 - r.ppl,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
