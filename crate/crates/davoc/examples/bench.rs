use std::time::Instant;

use davoc::adapt::{finetune, subset_pr_auc, train, CorpusData, LambdaSpec, Regime, TrainConfig};
use davoc::corpus::{generate_corpus, CorpusSpec, Subset};
use davoc::dsp::{FeatureConfig, FeatureKind};
use davoc::models::ModelKind;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).cloned().unwrap_or_else(|| "full".into());
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let dev_hidden: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let specs: Vec<LambdaSpec> = args[4..]
        .iter()
        .map(|s| s.parse().expect("lambda spec"))
        .collect();

    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec::default();
    let generated = generate_corpus(&spec, 0, dir.path()).unwrap();

    let mut feature = FeatureConfig::new(FeatureKind::Mfcc, 32.0, false);
    feature.context = 11;
    let mut base = TrainConfig::new(Regime::SourceOnly, ModelKind::Blstm, feature);
    base.epochs = epochs;
    base.device_hidden = dev_hidden;
    let (data, split) = CorpusData::load(&generated.manifest_path, &base.model_config()).unwrap();
    println!("mode={mode} epochs={epochs} specs={specs:?}");

    if mode == "sweep" {
        for seed in [0u64, 1] {
            let t0 = Instant::now();
            let mut b1 = base.clone();
            b1.seed = seed;
            let b1_run = train(&b1, &data, &split).unwrap();
            let b1_src =
                subset_pr_auc(&b1_run.model, &data, split.ids(Subset::SourceTest)).unwrap();
            let b1_tgt =
                subset_pr_auc(&b1_run.model, &data, split.ids(Subset::TargetTest)).unwrap();
            let mut to = base.clone();
            to.seed = seed;
            to.regime = Regime::TargetOnly;
            let to_run = train(&to, &data, &split).unwrap();
            let to_tgt =
                subset_pr_auc(&to_run.model, &data, split.ids(Subset::TargetTest)).unwrap();
            print!("seed {seed}: b1 src {b1_src:.4} tgt {b1_tgt:.4} tgt-only {to_tgt:.4}");
            for lam in &specs {
                let mut du = base.clone();
                du.seed = seed;
                du.regime = Regime::DatUnsupervised;
                du.lambda = *lam;
                let du_run = train(&du, &data, &split).unwrap();
                let du_tgt =
                    subset_pr_auc(&du_run.model, &data, split.ids(Subset::TargetTest)).unwrap();
                let m = &du_run.metrics;
                print!(
                    " | {lam} {du_tgt:.4} (Ld {:.3}>{:.3}>{:.3})",
                    m[0].device_loss,
                    m[m.len() / 2].device_loss,
                    m[m.len() - 1].device_loss
                );
            }
            println!("  ({:.1?})", t0.elapsed());
        }
        return;
    }

    let lam = specs.first().copied().unwrap_or(LambdaSpec::Constant(1.0));
    for seed in [0u64, 1, 2] {
        let t0 = Instant::now();
        let mut b1 = base.clone();
        b1.seed = seed;
        let b1_run = train(&b1, &data, &split).unwrap();
        let b1_src = subset_pr_auc(&b1_run.model, &data, split.ids(Subset::SourceTest)).unwrap();
        let b1_tgt = subset_pr_auc(&b1_run.model, &data, split.ids(Subset::TargetTest)).unwrap();

        let mut du = base.clone();
        du.seed = seed;
        du.regime = Regime::DatUnsupervised;
        du.lambda = lam;
        let du_run = train(&du, &data, &split).unwrap();
        let du_tgt = subset_pr_auc(&du_run.model, &data, split.ids(Subset::TargetTest)).unwrap();

        let mut ds = du.clone();
        ds.regime = Regime::DatSupervised;
        let ds_run = train(&ds, &data, &split).unwrap();
        let ds_tgt = subset_pr_auc(&ds_run.model, &data, split.ids(Subset::TargetTest)).unwrap();

        let mut ft = base.clone();
        ft.seed = seed;
        ft.regime = Regime::FrozenFineTune;
        let ft_run = finetune(&ft, &data, &split, &b1_run.model).unwrap();
        let ft_tgt = subset_pr_auc(&ft_run.model, &data, split.ids(Subset::TargetTest)).unwrap();

        println!(
            "seed {seed}: b1 src {b1_src:.4} | tgt: b1 {b1_tgt:.4} dat-unsup {du_tgt:.4} dat-sup {ds_tgt:.4} ft {ft_tgt:.4}  ({:.1?})",
            t0.elapsed()
        );
    }
}
