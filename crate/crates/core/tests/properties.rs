use proptest::prelude::*;

use meshmotion::augment::{PoseCorpus, PoseRecord, PoseSequence, Provenance, PART_COUNT};
use meshmotion::autograd::Tensor;
use meshmotion::datagen::{default_partition, largest_remainder, JOINT_COUNT};
use meshmotion::geometry::{build_frame_patches, geodesic_distances};
use meshmotion::mesh::{decode_sequence, encode_sequence, scramble_vertices, MeshFrame, MeshSequence};
use meshmotion::params::ParamStore;
use meshmotion::ssl::{chamfer_distance, sample_ffp_mask, sample_mvm_mask};

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-10.0f64..10.0)
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(point(), 1..=max)
}

/// A connected frame: a random spanning tree plus extra edges.
fn connected_frame(max_n: usize) -> impl Strategy<Value = MeshFrame> {
    (2..=max_n)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(prop::array::uniform3(-1.0f32..1.0), n),
                prop::collection::vec(any::<prop::sample::Index>(), n - 1),
                prop::collection::vec((0..n as u32, 0..n as u32), 0..=n),
            )
        })
        .prop_map(|(vertices, parents, extra)| {
            let mut edges = std::collections::BTreeSet::new();
            for (i, p) in parents.iter().enumerate() {
                let child = i as u32 + 1;
                let parent = p.index(i + 1) as u32;
                edges.insert([parent.min(child), parent.max(child)]);
            }
            for (a, b) in extra {
                if a != b {
                    edges.insert([a.min(b), a.max(b)]);
                }
            }
            MeshFrame::new(vertices, edges.into_iter().collect()).expect("valid")
        })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn pose(frames: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = PoseSequence> {
    frames
        .prop_flat_map(|t| {
            (
                Just(t),
                prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), t * JOINT_COUNT),
                prop::collection::vec(-1.0f64..1.0, 0..6),
                prop::collection::vec(-1.0f64..1.0, 0..6),
                prop::option::of(0usize..60),
            )
        })
        .prop_map(|(t, theta, shape, dynamics, label)| {
            PoseSequence::new(t, JOINT_COUNT, theta, shape, dynamics).expect("pose").with_label(label)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mseq_round_trip(frames in prop::collection::vec(connected_frame(12), 1..4)) {
        let seq = MeshSequence::new("s", None, frames).unwrap();
        let back = decode_sequence(&encode_sequence(&seq), "s").unwrap();
        prop_assert_eq!(back, seq);
    }

    #[test]
    fn mseq_truncation_is_an_error(frame in connected_frame(8), cut in any::<prop::sample::Index>()) {
        let bytes = encode_sequence(&MeshSequence::new("s", None, vec![frame]).unwrap());
        let cut = cut.index(bytes.len());
        prop_assert!(decode_sequence(&bytes[..cut], "s").is_err());
    }

    #[test]
    fn pose_corpus_round_trip(
        poses in prop::collection::vec(pose(1..=4), 1..4),
        prov in prop::option::of((prop::array::uniform5(0usize..100), 0usize..100)),
    ) {
        let records = poses
            .into_iter()
            .enumerate()
            .map(|(i, pose)| PoseRecord {
                id: format!("p{i}"),
                pose,
                provenance: prov.map(|(part_sources, shape_source)| Provenance { part_sources, shape_source }),
            })
            .collect();
        let corpus = PoseCorpus { partition: default_partition(), records };
        prop_assert_eq!(PoseCorpus::from_bytes(&corpus.to_bytes()).unwrap(), corpus);
    }

    #[test]
    fn checkpoint_round_trip(shapes in prop::collection::vec((1usize..4, 1usize..4), 1..5), fill in -5.0f64..5.0) {
        let mut store = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            let data = (0..r * c).map(|j| fill * j as f64 - i as f64).collect();
            store.add(format!("w{i}"), Tensor::matrix(r, c, data).unwrap());
        }
        let back = ParamStore::from_bytes(&store.to_bytes()).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for (a, b) in store.iter().zip(back.iter()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.value.shape(), b.value.shape());
            prop_assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn chamfer_is_a_symmetric_premetric(x in cloud(24), y in cloud(24)) {
        let xy = chamfer_distance(&x, &y).unwrap();
        prop_assert!(xy >= 0.0);
        prop_assert_eq!(xy.to_bits(), chamfer_distance(&y, &x).unwrap().to_bits());
        prop_assert_eq!(chamfer_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_is_translation_equivariant(x in cloud(24), y in cloud(24), v in prop::array::uniform3(-1.0f64..1.0)) {
        let shift = |s: &[[f64; 3]]| -> Vec<[f64; 3]> { s.iter().map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]]).collect() };
        let base = chamfer_distance(&x, &y).unwrap();
        let moved = chamfer_distance(&shift(&x), &shift(&y)).unwrap();
        // coordinates reach 10, so the shift itself rounds at about 1e-15
        prop_assert!((base - moved).abs() <= 1e-12 * base.max(1.0), "{} vs {}", base, moved);
    }

    #[test]
    fn geodesic_is_a_metric_above_euclidean(frame in connected_frame(24)) {
        let n = frame.vertex_count();
        let d: Vec<Vec<f64>> = (0..n).map(|s| geodesic_distances(&frame, s).unwrap()).collect();
        for u in 0..n {
            prop_assert_eq!(d[u][u], 0.0);
            for v in 0..n {
                prop_assert_eq!(d[u][v].to_bits(), d[v][u].to_bits());
                let (a, b) = (frame.position(u), frame.position(v));
                let e = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                prop_assert!(d[u][v] >= e - 1e-9);
                for w in 0..n {
                    // tick sums are exact, so the triangle inequality holds without slack
                    prop_assert!(d[u][w] <= d[u][v] + d[v][w]);
                }
            }
        }
    }

    #[test]
    fn patches_follow_vertices_under_permutation(
        (frame, perm) in connected_frame(30).prop_flat_map(|f| { let n = f.vertex_count(); (Just(f), permutation(n)) }),
        c in 1usize..4,
        k in 1usize..4,
    ) {
        let n = frame.vertex_count();
        prop_assume!(c <= n && k < n);
        let scrambled = scramble_vertices(&frame, &perm).unwrap();
        let a = build_frame_patches(&frame, 0, c, k).unwrap();
        let b = build_frame_patches(&scrambled, 0, c, k).unwrap();
        let mapped: Vec<usize> = a.centers.iter().map(|&v| perm[v]).collect();
        prop_assert_eq!(&mapped, &b.centers);
        for (pa, pb) in a.geo.iter().chain(&a.euc).zip(b.geo.iter().chain(&b.euc)) {
            let mapped: Vec<usize> = pa.neighbor_indices.iter().map(|&v| perm[v]).collect();
            prop_assert_eq!(mapped, pb.neighbor_indices.clone());
            prop_assert_eq!(&pa.metric_distances, &pb.metric_distances);
            prop_assert_eq!(pa.features(), pb.features());
        }
    }

    #[test]
    fn mvm_mask_has_exact_cardinality(p in 2usize..200, r in 0.01f64..0.99, seed in any::<u64>()) {
        let want = (r * p as f64).round() as usize;
        match sample_mvm_mask(p, r, seed) {
            Ok(mask) => {
                prop_assert_eq!(mask.len(), p);
                prop_assert_eq!(mask.iter().filter(|&&m| m).count(), want);
                prop_assert_eq!(sample_mvm_mask(p, r, seed).unwrap(), mask);
            }
            Err(_) => prop_assert!(want == 0 || want == p),
        }
    }

    #[test]
    fn ffp_mask_is_a_nonempty_proper_suffix(t in 2usize..64, f in 0.01f64..0.99) {
        if let Ok(mask) = sample_ffp_mask(t, f) {
            let first = mask.iter().position(|&m| m).unwrap();
            prop_assert!(first >= 1);
            prop_assert!(mask[first..].iter().all(|&m| m));
            prop_assert!(!mask[..first].iter().any(|&m| m));
        }
    }

    #[test]
    fn largest_remainder_apportions_everything(n in 0usize..1000, raw in prop::collection::vec(0.01f64..1.0, 1..6)) {
        let total: f64 = raw.iter().sum();
        let ratios: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let counts = largest_remainder(n, &ratios);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, r) in counts.iter().zip(&ratios) {
            let ideal = r * n as f64;
            prop_assert!((*c as f64 - ideal).abs() < 1.0 + 1e-9);
        }
    }
}

#[test]
fn partition_covers_every_joint_once() {
    let p = default_partition();
    let mut seen = [0; JOINT_COUNT];
    for part in 0..PART_COUNT {
        for &j in p.part(part) {
            seen[j] += 1;
        }
    }
    assert!(seen.iter().all(|&s| s == 1));
}
