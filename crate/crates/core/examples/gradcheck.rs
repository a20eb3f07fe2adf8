// Central-difference gradient checks, first on a single attention layer
// and then on the full model with both loss terms.

use compad::numkit::{check_gradient, Matrix, Parameterized};
use compad::scenegraph::{build_edge_list, gat_layer_backward, gat_layer_forward, GatLayer, Topology};
use compad::trainer::gradcheck_random_model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> compad::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut layer = GatLayer::new_random(2, 5, 4, &mut rng)?;
    let x = Matrix::from_vec(4, 5, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let edges = build_edge_list(Topology::Star, &[0, 1, 1]);

    // Objective: sum of squares of the layer output.
    let objective = |l: &GatLayer| {
        let (y, _) = gat_layer_forward(&x, &edges, l).unwrap();
        y.data().iter().map(|v| v * v).sum::<f64>()
    };
    let (y, cache) = gat_layer_forward(&x, &edges, &layer)?;
    layer.zero_grads();
    gat_layer_backward(&y.map(|v| 2.0 * v), &edges, &mut layer, &cache)?;
    let report = check_gradient(&mut layer, 1e-5, objective)?;
    println!(
        "attention layer: {} coordinates, max rel error {:.2e}",
        report.coordinates, report.max_rel_error
    );

    let mut worst: f64 = report.max_rel_error;
    for seed in 0..4 {
        let r = gradcheck_random_model(seed, 1e-5)?;
        println!("full model seed {seed}: max rel error {:.2e}", r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

fn main() -> compad::Result<()> {
    let worst = run_example()?;
    assert!(worst < 1e-4);
    Ok(())
}
