use std::fs;
use std::path::Path;

use warpadapt::config::CliConfig;
use warpadapt::gradcore::{kernel_suite, CheckOutcome, Graph, Tensor};
use warpadapt::losses::loss_suite;
use warpadapt::metrics::{evaluate, psnr, D1Mode, EvalOptions, FlowValidity};
use warpadapt::netlib::NetworkHandle;
use warpadapt::scenegen::{generate_paired_domains, read_sample, write_dataset, write_ppm, write_tensor_file, Domain};
use warpadapt::trainer::{load_checkpoint, run_training, run_training_from, Datasets};

use crate::{Direction, Failure, Split};

/// Splits `--key value` and `--key=value` tokens into pairs.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| Failure::Usage(format!("expected --key value, got {tok:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::Usage(format!("--{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Defaults, then the file, then the overrides.
pub fn load_config<'a>(
    file: Option<&Path>,
    overrides: impl Iterator<Item = (&'a str, String)>,
) -> Result<CliConfig, Failure> {
    let mut cfg = match file {
        Some(p) => CliConfig::from_file(p).map_err(|e| match e {
            warpadapt::Error::Io { .. } => Failure::Usage(e.to_string()),
            other => other.into(),
        })?,
        None => CliConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, &v)
            .map_err(|e| Failure::Usage(format!("--{k}: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn generate(cfg: &CliConfig, out: &Path) -> Result<(), Failure> {
    let samples = generate_paired_domains(cfg.data_seed, cfg.count, &cfg.scene, &cfg.shift()?)?;
    write_dataset(&samples, out)?;
    let n_train = cfg.count * 4 / 5;
    println!(
        "wrote {} synthetic + {} real samples ({}x{}, shift {}, seed {}; {} train / {} val per domain) to {}",
        cfg.count,
        cfg.count,
        cfg.scene.width,
        cfg.scene.height,
        cfg.shift_preset,
        cfg.data_seed,
        n_train,
        cfg.count - n_train,
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &CliConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let datasets = Datasets::load(data)?;
    fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Failure::Data(format!("{}: {e}", cfg_path.display())))?;
    let outcome = match resume {
        Some(p) => run_training_from(load_checkpoint(p)?, &cfg.train, &datasets, Some(out))?,
        None => run_training(&cfg.train, &datasets, Some(out))?,
    };
    println!("trained {} iterations; final checkpoint {}", outcome.state.iteration, out.join("final.wck").display());
    print!("{}", outcome.report.to_text());
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    d1_mode: D1Mode,
    split: Split,
    noc: bool,
    oracle: bool,
) -> Result<(), Failure> {
    let state = load_checkpoint(checkpoint)?;
    let d = Datasets::load(data)?;
    let samples = match split {
        Split::RealVal => d.real_val,
        Split::SynVal => d.syn_val,
        Split::Real => [d.real_train, d.real_val].concat(),
        Split::Syn => [d.syn_train, d.syn_val].concat(),
    };
    let opts = EvalOptions {
        d1_mode,
        flow_validity: if noc { FlowValidity::NonOccluded } else { FlowValidity::All },
        oracle,
    };
    let report = evaluate(&state.nets.eval_models(), &samples, &opts)?;
    print!("{}", report.to_text());
    Ok(())
}

fn apply(net: &NetworkHandle, img: &Tensor) -> Result<Tensor, Failure> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(img.clone());
    let (_, out) = net.run(&mut g, false, &[x])?;
    Ok(g.value(out.output).clone())
}

fn save(img: &Tensor, out: &Path, stem: &str) -> Result<(), Failure> {
    write_ppm(img, &out.join(format!("{stem}.ppm")))?;
    write_tensor_file(img, &out.join(format!("{stem}.wten")))?;
    Ok(())
}

pub fn translate(checkpoint: &Path, input: &Path, out: &Path, direction: Direction) -> Result<(), Failure> {
    let state = load_checkpoint(checkpoint)?;
    let sample = read_sample(input)?;
    let nets = &state.nets;
    match (direction, sample.domain) {
        (Direction::A2b, Domain::Real) => log::warn!("a2b expects a synthetic sample; {} is real", input.display()),
        (Direction::B2a, Domain::Synthetic) => {
            log::warn!("b2a expects a real sample; {} is synthetic", input.display())
        }
        _ => {}
    }
    fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    let from_real = match direction {
        Direction::A2b => false,
        Direction::B2a => true,
        Direction::Cycle => sample.domain == Domain::Real,
    };
    let (forward, backward, fake) = if from_real {
        (&nets.g_b2a, &nets.g_a2b, "fake_synthetic")
    } else {
        (&nets.g_a2b, &nets.g_b2a, "fake_real")
    };
    for (frame, img) in [
        ("left", &sample.left),
        ("right", &sample.right),
        ("next_left", &sample.next_left),
    ] {
        save(img, out, &format!("{frame}_original"))?;
        let translated = apply(forward, img)?;
        save(&translated, out, &format!("{frame}_{fake}"))?;
        let (label, compared) = match direction {
            Direction::Cycle => {
                let rec = apply(backward, &translated)?;
                save(&rec, out, &format!("{frame}_reconstructed"))?;
                ("reconstruction", rec)
            }
            _ => ("translation", translated),
        };
        println!("{frame}\t{label} psnr={}", fmt_db(psnr(&compared, img)?));
    }
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

pub fn gradcheck(seed: u64) -> Result<(), Failure> {
    let mut rows: Vec<(&str, CheckOutcome)> = Vec::new();
    rows.extend(kernel_suite(seed)?.into_iter().map(|o| ("kernel", o)));
    rows.extend(loss_suite(seed)?.into_iter().map(|o| ("loss", o)));
    println!("{:<8}{:<36}{:>14}{:>12}  status", "kind", "name", "max_rel_err", "threshold");
    let mut failed = Vec::new();
    for (kind, o) in &rows {
        let ok = o.passed();
        println!(
            "{kind:<8}{:<36}{:>14.3e}{:>12.0e}  {}",
            o.name,
            o.max_rel_error,
            o.threshold,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(format!("{kind} {}", o.name));
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed (seed {seed})", rows.len());
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))))
    }
}
