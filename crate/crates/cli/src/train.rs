use std::fs::OpenOptions;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use v2l_core::tokenizer::io::{load_checkpoint, save_checkpoint, Checkpoint};
use v2l_core::tokenizer::{StepLog, TokenizerModel, Trainer};

use crate::config::{stage_seed, RunConfig};
use crate::data::{check_tables, extractor, features, load_global, load_images, load_local};
use crate::error::{CliError, CliResult, Context};

pub const LOSS_HEADER: &str = "step,epoch,lr,loss,recon,codebook,commit";

fn csv_line(l: &StepLog) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        l.step, l.epoch, l.lr, l.loss, l.recon, l.codebook, l.commit
    )
}

pub fn train(cfg: &RunConfig, resume: bool, max_steps: Option<u64>) -> CliResult<()> {
    let (_, local) = load_local(cfg)?;
    let (_, global) = load_global(cfg)?;
    check_tables(cfg, &local, &global)?;
    let images = load_images(cfg)?;
    let side = cfg.model.image_size;
    if let Some((n, img)) = images
        .names
        .iter()
        .zip(&images.items)
        .find(|(_, t)| t.shape() != [3, side, side])
    {
        return Err(CliError::user(format!(
            "image {n} has shape {:?}, model.image_size needs [3, {side}, {side}]",
            img.shape()
        )));
    }
    let feats = features(extractor(cfg)?.as_ref(), &images)?;
    let ck_path = cfg.output("checkpoint", &cfg.paths.checkpoint)?;

    let mut trainer = if resume {
        let mut ck = load_checkpoint(&ck_path).ctx(ck_path.display())?;
        if ck.model != cfg.model || ck.train.as_ref() != Some(&cfg.train) {
            return Err(CliError::user(format!(
                "{} was written with different [model] or [train] settings (or seed); resume needs the same config",
                ck_path.display()
            )));
        }
        let state = ck
            .optimizer
            .take()
            .ok_or_else(|| CliError::user(format!("{} holds no optimizer state", ck_path.display())))?;
        let adam = state.into_adam(cfg.train.adam)?;
        let model = ck.into_model(local, global).ctx(ck_path.display())?;
        Trainer::resume(model, cfg.train.clone(), images.items, &feats, adam)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "init"));
        let model = TokenizerModel::init(cfg.model.clone(), local, global, &mut rng)?;
        Trainer::new(model, cfg.train.clone(), images.items, &feats)?
    };

    std::fs::create_dir_all(&cfg.run_dir)?;
    let loss_path = cfg.run_dir.join("loss.csv");
    let mut csv = if resume && loss_path.exists() {
        OpenOptions::new().append(true).open(&loss_path)?
    } else {
        let mut f = std::fs::File::create(&loss_path)?;
        writeln!(f, "{LOSS_HEADER}")?;
        f
    };
    let ck_dir = cfg.run_dir.join("checkpoints");
    let every = cfg.checkpoint_every;
    let first = trainer.step_count();
    let mut failure: Option<CliError> = None;
    let logs = trainer.run(max_steps.unwrap_or(u64::MAX), |t, log| {
        if failure.is_some() {
            return;
        }
        let mut write = || -> CliResult<()> {
            csv.write_all(csv_line(log).as_bytes())?;
            if every > 0 && log.step % every == 0 {
                std::fs::create_dir_all(&ck_dir)?;
                let path = ck_dir.join(format!("step-{:06}.v2lm", log.step));
                save_checkpoint(&path, &Checkpoint::from_model(&t.model, Some((&t.config, t.optimizer()))))
                    .ctx(path.display())?;
            }
            Ok(())
        };
        failure = write().err();
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    csv.flush()?;
    let ck = Checkpoint::from_model(&trainer.model, Some((&trainer.config, trainer.optimizer())));
    save_checkpoint(&ck_path, &ck).ctx(ck_path.display())?;
    match logs.last() {
        Some(l) => println!(
            "steps {}..{} of {}: loss {:.6} (recon {:.6}), lr {:.3e}",
            first + 1,
            l.step,
            trainer.total_steps(),
            l.loss,
            l.recon,
            l.lr
        ),
        None => println!("no steps run ({} of {} done)", first, trainer.total_steps()),
    }
    println!("wrote {}", ck_path.display());
    Ok(())
}
