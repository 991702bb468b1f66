//! A short training run on a reduced configuration, then evaluation in both settings.

use iwin::harness::config::RunConfig;
use iwin::harness::eval::Setting;
use iwin::harness::train::{evaluate_model, train, Split};

fn main() -> iwin::Result<()> {
    let cfg: RunConfig = "
        image_size = 32
        d_c = 8
        query_dim = 32
        decoder = stacked:2
        decoder_ffn = 64
        scales1 = 2,3
        scales2 = 2
        scales3 = 2
        train_scenes = 32
        val_scenes = 16
        epochs = 5
        batch_size = 8
        eval_every = 5
    "
    .parse()?;
    let split = Split::from_config(&cfg)?;
    let out = train(&cfg, &split, None, |log| {
        println!("epoch {:2} loss {:.4}", log.epoch, log.loss)
    })?;
    let counts = split.training_counts();
    for setting in [Setting::Default, Setting::KnownObject] {
        let r = evaluate_model(&out.best, &split.val, setting, Some(&counts))?;
        println!("{setting:?}: mAP {:.4}", r.map_full);
    }
    Ok(())
}
