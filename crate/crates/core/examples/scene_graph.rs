// One local scene under the four graph topologies: edge lists, the scene
// node's attention in the first layer, and the pooled embedding.

use compad::scenegraph::{
    build_edge_list, sgat_forward_nodes, AgentNode, Readout, SceneSnippet, SgatShape, SgatStack,
    Topology,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> compad::Result<Vec<(Topology, usize)>> {
    let snippet = SceneSnippet {
        snippet_index: 0,
        scene_feature: vec![0.5, -0.2, 0.1, 0.9],
        agents: vec![
            AgentNode { label_id: 0, feature: vec![1.0, 0.0, 0.3, -0.4] },
            AgentNode { label_id: 2, feature: vec![0.2, 0.8, -0.1, 0.0] },
            AgentNode { label_id: 0, feature: vec![-0.6, 0.1, 0.7, 0.2] },
        ],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = SgatShape { input_dim: 4, head_dim: 6, num_classes: 3, scene_dim: 8 };
    let stack = SgatStack::new_random(shape, Readout::Aggregated, &mut rng)?;

    let mut sizes = Vec::new();
    for topology in Topology::ALL {
        let edges = build_edge_list(topology, &snippet.agent_labels());
        let x = snippet.node_features(topology)?;
        let (emb, cache) = sgat_forward_nodes(&x, &edges, &stack)?;
        let att = cache.layer(0).attention(0, 0);
        println!("{topology}: {} directed edges incl. self-loops", edges.len());
        println!("  scene node attends to {:?} with {att:.3?}", edges.neighbors(0));
        println!("  embedding[..3] = {:.4?}", &emb[..3]);
        sizes.push((topology, edges.len()));
    }
    Ok(sizes)
}

fn main() -> compad::Result<()> {
    run_example()?;
    Ok(())
}
