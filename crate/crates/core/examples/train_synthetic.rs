// Generates the synthetic corpus, trains on it and scores the held-out
// split at IoU 0.3 / 0.5 / 0.7.
//
//     cargo run --release --example train_synthetic -- [epochs] [topology]

use compad::dataio::{annotations_to_segments, gen_synthetic, SyntheticConfig};
use compad::evalkit::mean_ap;
use compad::scenegraph::Topology;
use compad::trainer::{detect, train, TrainConfig};

pub fn run_example(epochs: usize, topology: Topology) -> compad::Result<(Vec<f64>, f64)> {
    let data = gen_synthetic(&SyntheticConfig::default())?;
    println!(
        "{} train / {} test videos, probe accuracy {:.3}",
        data.train.videos.len(),
        data.test.videos.len(),
        data.probe_accuracy
    );
    let cfg = TrainConfig { epochs, topology, ..TrainConfig::default() };
    let start = std::time::Instant::now();
    let ck = train(&cfg, &data.train)?;
    println!("trained {topology} for {epochs} epochs in {:.1?}", start.elapsed());
    for (e, l) in ck.loss_trace.iter().enumerate() {
        println!("epoch {e:>2}  loss {l:.4}");
    }
    let preds = detect(&ck, &data.test, &cfg.decode, 0)?;
    let report = mean_ap(&preds, &annotations_to_segments(&data.test.annotations), &[0.3, 0.5, 0.7])?;
    print!("{}", report.to_table());
    Ok((ck.loss_trace, report.average_map))
}

fn main() -> compad::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(30);
    let topology = match args.next() {
        Some(t) => t.parse()?,
        None => Topology::FullyConnected,
    };
    run_example(epochs, topology)?;
    Ok(())
}
