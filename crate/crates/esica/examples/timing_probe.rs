use esica::metrics::{dsc, BinaryMask};
use esica::model::{Model, ModelConfig};
use esica::pipeline::data::{preprocess, synth_dataset, SynthOptions};
use esica::pipeline::infer::{sliding_window_infer, InferOptions};
use esica::pipeline::sample::TrainConfig;
use esica::pipeline::train::train;
use esica::text::TextProvider;

fn val_dice(model: &Model, provider: &TextProvider, vols: &[esica::pipeline::data::LabeledVolume], n_passes: usize) -> f64 {
    let opts = InferOptions { patch: (48, 48, 48), overlap: 0.5, n_passes };
    let mut scores = Vec::new();
    for v in vols {
        let (pv, _) = preprocess(v, (1.5, 1.5, 1.5), false).unwrap();
        for class in pv.present_classes() {
            let prompt = &pv.class_prompts[&class][0];
            let probs = sliding_window_infer(model, provider, &pv, prompt, &opts).unwrap();
            let pred: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
            let pm = BinaryMask::new(pred, pv.extents, pv.spacing).unwrap();
            let gm = BinaryMask::new(pv.class_mask(class), pv.extents, pv.spacing).unwrap();
            scores.push(dsc(&pm, &gm).unwrap());
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn main() {
    // Average foreground fraction with the bigger shapes:
    let check = synth_dataset(77, 10, &SynthOptions::default()).unwrap();
    let fg: f64 = check.iter().map(|v| v.labels.iter().filter(|&&l| l != 0).count() as f64 / v.labels.len() as f64).sum::<f64>() / 10.0;
    println!("mean fg fraction: {:.3}", fg);

    let train_vols = synth_dataset(100, 20, &SynthOptions::default()).unwrap();
    let val_vols = synth_dataset(200, 5, &SynthOptions::default()).unwrap();
    let provider = TextProvider::toy(32);
    for (lr, lambda, epochs) in [(0.1, 1.0, 5usize), (0.1, 10.0, 5), (0.03, 10.0, 5)] {
        let mut model = Model::new(&ModelConfig::toy(), 1000).unwrap();
        let cfg = TrainConfig {
            patch: (48, 48, 48),
            n_passes: 2,
            epochs,
            lr,
            lambda_focal: lambda,
            ..TrainConfig::stage1()
        };
        match train(&mut model, &provider, &train_vols, &cfg, 5000, None) {
            Ok(r) => {
                let d = val_dice(&model, &provider, &val_vols, 2);
                let last5: f64 = r.step_losses.iter().rev().take(5).sum::<f64>() / 5.0;
                println!("lr {lr} lambda {lambda} steps {}: loss {:.3} -> {:.3} | val dice {:.4}",
                    r.steps, r.step_losses[0], last5, d);
            }
            Err(e) => println!("lr {lr} lambda {lambda}: DIVERGED {e}"),
        }
    }
}
