use cnri_core::data::{generate_dataset, CorpusConfig};

#[test]
#[ignore]
fn scan() {
    for seed in 0..30u64 {
        let ds = generate_dataset(
            &CorpusConfig { n_systems: 3, cycles_per_system: (1, 1), bodies: 3, frames: 2, ..CorpusConfig::default() },
            seed,
        )
        .unwrap();
        let adj = ds.meta.shared_adjacency.unwrap();
        eprintln!("seed {seed}: edges {} -> {:?}", adj.edge_count(), adj.entries());
    }
}
