use std::io::Write;
use std::time::Instant;

use tdst::autograd::{GradFault, OpKind};
use tdst::data::{generate_synthetic_corpus, Schema, Vocab};
use tdst::gradcheck::{check_model_gradients, Coverage, GradCheckReport};
use tdst::model::{DstModel, LossTerm, ReuseSpec};
use tdst::ModelConfig;

use crate::cli::GradcheckArgs;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const THRESHOLD: f64 = 1e-4;

fn parse_fault(name: &str) -> CliResult<GradFault> {
    let op = match name {
        "gelu" => OpKind::Gelu,
        "softmax" => OpKind::MaskedSoftmax,
        "layernorm" => OpKind::LayerNorm,
        "matmul" => OpKind::MatMul,
        other => return Err(CliError::usage(format!("unknown fault op {other:?}"))),
    };
    Ok(GradFault { op, factor: 1.1 })
}

pub fn run(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if !(1e-6..=1e-4).contains(&args.eps) {
        return Err(CliError::usage(format!("--eps {} outside [1e-6, 1e-4]", args.eps)));
    }
    if args.slots == 0 {
        return Err(CliError::usage("--slots must be at least 1"));
    }
    let (mut model_config, seed, reuse) = match &args.config {
        Some(p) => {
            let c = RunConfig::load(p)?;
            (c.train.model, c.train.seed, c.train.reuse)
        }
        None => (ModelConfig::toy(0), 42, ReuseSpec::best()),
    };
    let fault = args.inject_fault.as_deref().map(parse_fault).transpose()?;
    let full = Schema::default_synthetic();
    if args.slots > full.len() {
        return Err(CliError::usage(format!("--slots must be at most {}", full.len())));
    }
    let schema = full.truncated(args.slots);
    let records = generate_synthetic_corpus(&schema, 4, 4, seed)?;
    let vocab = Vocab::build(&schema, &records);
    model_config.vocab_size = vocab.len();
    model_config.init_std = args.init_std;
    let model = DstModel::<f64>::new(model_config.clone(), vocab, schema, reuse, 6, seed)?;
    let examples = model.build_examples(&records)?;
    let batch: Vec<_> = examples.into_iter().filter(|e| e.num_updates() > 0).take(1).collect();
    if batch.is_empty() {
        return Err(CliError::data("no turn with an UPDATE slot in the check corpus"));
    }
    let coverage = match args.per_param {
        0 => Coverage::All,
        n => Coverage::Sample { per_param: n, seed },
    };

    writeln!(
        out,
        "gradient check: L={} h={} d={} J={} eps={:e} precision f64{}",
        model_config.num_layers,
        model_config.num_heads,
        model_config.hidden_dim,
        args.slots,
        args.eps,
        if fault.is_some() { " (fault injected)" } else { "" }
    )?;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (name, term) in [("sop_loss", LossTerm::Sop), ("vg_loss", LossTerm::Vg), ("joint_loss", LossTerm::Joint)] {
        let r: GradCheckReport = check_model_gradients(&model, &batch, term, args.eps, coverage, fault)?;
        let at = r
            .worst
            .as_ref()
            .map(|(p, i)| format!(" at {p}[{i}]"))
            .unwrap_or_default();
        writeln!(
            out,
            "  {name:<10} max relative error {:.3e}{at} over {} coordinates",
            r.max_relative_error, r.coordinates_checked
        )?;
        worst = worst.max(r.max_relative_error);
    }
    let verdict = if worst < THRESHOLD { "PASS" } else { "FAIL" };
    writeln!(
        out,
        "max relative error {worst:.3e} (threshold {THRESHOLD:e}) {verdict} in {:.1}s",
        start.elapsed().as_secs_f64()
    )?;
    if worst < THRESHOLD {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradient check failed: max relative error {worst:.3e} >= {THRESHOLD:e}"
        )))
    }
}
