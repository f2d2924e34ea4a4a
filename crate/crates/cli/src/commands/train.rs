use anyhow::Result;
use stepflow::denoiser::{save_checkpoint, NeuralDenoiser};
use stepflow::shortcut_teacher::EmaRegistry;
use stepflow::trainer_eval::{finetune_loop, loss_curve_csv, pretrain_loop, LossRecord, Phase};

use super::{check_compatible, checkpoint_metadata, data_for, fresh_data, load_model, Data};
use crate::artifacts::write_atomic;
use crate::config::RunConfig;

fn tail_loss(curve: &[LossRecord]) -> f64 {
    let tail = &curve[curve.len() - curve.len().div_ceil(10)..];
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let (data, decoder) = fresh_data(cfg)?;
    let mut model = NeuralDenoiser::new(cfg.network(data.vocab(), data.seq_len()), cfg.seed)?;
    let tc = cfg.train_config(Phase::Pretrain)?;
    let curve = match &data {
        Data::Board(d) => pretrain_loop(&tc, d, &mut model)?,
        Data::Text(c) => pretrain_loop(&tc, c, &mut model)?,
    };
    write_atomic(&cfg.output_dir.join("pretrain_loss.csv"), loss_curve_csv(&curve).as_bytes())?;
    save_checkpoint(&cfg.checkpoint, &model, &checkpoint_metadata(cfg, "pretrain", &decoder))?;
    let last = if curve.is_empty() { f64::NAN } else { tail_loss(&curve) };
    Ok(format!("pretrained {} steps, final loss {last:.4}, checkpoint {}", curve.len(), cfg.checkpoint.display()))
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<String> {
    let loaded = load_model(&cfg.checkpoint)?;
    let data = data_for(cfg, &loaded)?;
    let mut model = loaded.model;
    check_compatible(&data, &model)?;
    let tc = cfg.train_config(Phase::Finetune)?;
    let mut ema = EmaRegistry::new(model.params(), cfg.ema_decay)?;
    let curve = match &data {
        Data::Board(d) => finetune_loop(&tc, d, &mut model, &mut ema)?,
        Data::Text(c) => finetune_loop(&tc, c, &mut model, &mut ema)?,
    };
    write_atomic(&cfg.output_dir.join("finetune_loss.csv"), loss_curve_csv(&curve).as_bytes())?;
    save_checkpoint(&cfg.finetuned, &model, &checkpoint_metadata(cfg, "finetune", &loaded.decoder))?;
    let last = if curve.is_empty() { f64::NAN } else { tail_loss(&curve) };
    Ok(format!("fine-tuned {} steps, final loss {last:.4}, checkpoint {}", curve.len(), cfg.finetuned.display()))
}
