//! Rotation, relative patch location and jigsaw pretext tasks.

mod jigsaw;
mod patches;
mod rotation;

pub use jigsaw::{
    generate_permutation_set, greedy_permutation_set, hamming, inverse_permutation, jigsaw_inputs, jigsaw_loss,
    jigsaw_loss_from_embeddings, mean_pairwise_hamming, permuted_rows, sample_permutation_choices, PermutationSet,
    MAX_ENUMERABLE,
};
pub use patches::{
    color_jitter, embed_patches, extract_patches, location_loss, location_loss_from_embeddings, location_pairs,
    merge_patch_embeddings, patch_branch_loss, patch_branch_loss_from_embeddings, resize_bilinear, stack_patches,
    PatchGeometry, PatchGrid, CENTER, GRID, LOCATIONS, LOCATION_CELLS, NUM_PATCHES,
};
pub use rotation::{rotate, rotation_loss, RotationTask, ROTATIONS};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;
    use crate::model::{Backbone, CosineClassifier, LinearHead};
    use crate::ndgrad::gradcheck::check_gradients;
    use crate::ndgrad::Tensor;

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn rotate_examples() {
        let img = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(rotate(&img, 0).unwrap().to_vec(), img.to_vec());
        // [[a,b],[c,d]] → [[b,d],[a,c]]
        assert_eq!(rotate(&img, 1).unwrap().to_vec(), vec![2., 4., 1., 3.]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big = Tensor::<f64>::new(&[2, 5, 5], noise(&mut rng, 50)).unwrap();
        let mut r = big.clone();
        for _ in 0..4 {
            r = rotate(&r, 1).unwrap();
        }
        assert_eq!(r.to_vec(), big.to_vec());
        let rect = Tensor::<f64>::zeros(&[1, 2, 3]).unwrap();
        assert!(matches!(rotate(&rect, 1), Err(Error::Geometry(_))));
    }

    #[test]
    fn rotation_group_table_is_z4() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::<f64>::new(&[1, 4, 4], noise(&mut rng, 16)).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let composed = rotate(&rotate(&img, a).unwrap(), b).unwrap();
                assert_eq!(composed.to_vec(), rotate(&img, (a + b) % 4).unwrap().to_vec());
            }
        }
    }

    #[test]
    fn rotation_task_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = Tensor::<f64>::new(&[3, 1, 4, 4], noise(&mut rng, 48)).unwrap();
        let task = RotationTask::new(&batch).unwrap();
        assert_eq!(task.len(), 12);
        assert_eq!(task.images.shape(), &[12, 1, 4, 4]);
        for r in 0..4 {
            assert_eq!(task.labels.iter().filter(|&&l| l == r).count(), 3);
        }
    }

    #[test]
    fn rotation_loss_bounds_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Backbone::<f64>::new(1, &[3, 4], &[6], &mut rng).unwrap();
        let batch = Tensor::new(&[2, 1, 6, 6], noise(&mut rng, 72)).unwrap();
        let task = RotationTask::new(&batch).unwrap();
        let uniform = LinearHead::zeros(4, 4).unwrap();
        let l = rotation_loss(&task, &net, &uniform).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        // logits that read the label off directly
        let oracle: Vec<f64> = task.labels.iter().flat_map(|&y| (0..4).map(move |c| if c == y { 50.0 } else { 0.0 })).collect();
        let l = Tensor::<f64>::new(&[8, 4], oracle).unwrap().softmax_cross_entropy(&task.labels).unwrap().item();
        assert!(l < 1e-12);

        let head = LinearHead::<f64>::new(4, 4, &mut rng).unwrap();
        let r = check_gradients(net.kernels(), |_| rotation_loss(&task, &net, &head), 1e-5).unwrap();
        assert!(r.passes(1e-5), "{r:?}");
    }

    #[test]
    fn patches_without_jitter_tile_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::<f64>::new(&[2, 9, 9], noise(&mut rng, 162)).unwrap();
        let grid = extract_patches(&img, PatchGeometry::new(9, 3).unwrap(), &mut rng).unwrap();
        assert_eq!(grid.patches.len(), 9);
        let data = img.to_vec();
        for (idx, p) in grid.patches.iter().enumerate() {
            assert_eq!(grid.offsets[idx], (0, 0));
            let (gy, gx) = (idx / 3, idx % 3);
            let pd = p.to_vec();
            for c in 0..2 {
                for y in 0..3 {
                    for x in 0..3 {
                        assert_eq!(pd[(c * 3 + y) * 3 + x], data[(c * 9 + gy * 3 + y) * 9 + gx * 3 + x]);
                    }
                }
            }
        }
    }

    #[test]
    fn paper_geometry_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Tensor::<f32>::new(&[1, 80, 80], vec![0.5; 6400]).unwrap();
        let geom = PatchGeometry::new(96, 24).unwrap();
        assert_eq!(geom.cell(), 32);
        for _ in 0..20 {
            let grid = extract_patches(&img, geom, &mut rng).unwrap();
            for (p, &(dy, dx)) in grid.patches.iter().zip(&grid.offsets) {
                assert_eq!(p.shape(), &[1, 24, 24]);
                assert!(dy <= 8 && dx <= 8);
            }
        }
    }

    #[test]
    fn jittered_patches_reconstruct_sampled_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = Tensor::<f64>::new(&[1, 32, 32], noise(&mut rng, 1024)).unwrap();
        let geom = PatchGeometry::new(36, 9).unwrap();
        let grid = extract_patches(&img, geom, &mut rng).unwrap();
        let resized = resize_bilinear(&img, 36).unwrap().to_vec();
        for (idx, (p, &(dy, dx))) in grid.patches.iter().zip(&grid.offsets).enumerate() {
            let (y0, x0) = ((idx / 3) * 12 + dy, (idx % 3) * 12 + dx);
            let pd = p.to_vec();
            for y in 0..9 {
                for x in 0..9 {
                    assert_eq!(pd[y * 9 + x].to_bits(), resized[(y0 + y) * 36 + x0 + x].to_bits());
                }
            }
        }
        // same seed, same crops
        let a = extract_patches(&img, geom, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = extract_patches(&img, geom, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.offsets, b.offsets);
    }

    #[test]
    fn geometry_errors() {
        assert!(matches!(PatchGeometry::new(36, 13), Err(Error::Geometry(_))));
        assert!(matches!(PatchGeometry::new(35, 9), Err(Error::Geometry(_))));
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Tensor::<f64>::new(&[1, 5, 5], vec![0.25; 25]).unwrap();
        for size in [3, 9, 12] {
            assert!(resize_bilinear(&img, size).unwrap().to_vec().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    fn grids(rng: &mut ChaCha8Rng, batch: usize) -> Vec<PatchGrid<f64>> {
        let geom = PatchGeometry::new(12, 3).unwrap();
        (0..batch)
            .map(|_| {
                let img = Tensor::new(&[1, 12, 12], noise(rng, 144)).unwrap();
                extract_patches(&img, geom, rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn location_loss_uniform_symmetry_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Backbone::<f64>::new(1, &[3, 4], &[3], &mut rng).unwrap();
        let g = grids(&mut rng, 2);
        let l = location_loss(&g, &net, &LinearHead::zeros(8, 8).unwrap()).unwrap().item();
        assert!((l - 8f64.ln()).abs() < 1e-12);

        // Relabeling the classes consistently (permuting head columns along
        // with labels) leaves the loss unchanged.
        let head = LinearHead::<f64>::new(8, 8, &mut rng).unwrap();
        let emb = embed_patches(&g, &net).unwrap();
        let (pairs, labels) = location_pairs(&emb).unwrap();
        let base = head.forward(&pairs).unwrap().softmax_cross_entropy(&labels).unwrap().item();
        let relabel = [3, 7, 0, 5, 1, 6, 2, 4];
        let w = head.weight.to_vec();
        let mut pw = vec![0.0; 64];
        for r in 0..8 {
            for c in 0..8 {
                pw[r * 8 + relabel[c]] = w[r * 8 + c];
            }
        }
        let permuted = LinearHead { weight: Tensor::param(&[8, 8], pw).unwrap(), bias: Tensor::param(&[8], vec![0.0; 8]).unwrap() };
        let new_labels: Vec<usize> = labels.iter().map(|&l| relabel[l]).collect();
        let shuffled = permuted.forward(&pairs).unwrap().softmax_cross_entropy(&new_labels).unwrap().item();
        assert!((base - shuffled).abs() < 1e-12);

        let mut inputs = net.kernels().to_vec();
        inputs.push(head.weight.clone());
        let r = check_gradients(&inputs, |_| location_loss(&g, &net, &head), 1e-5).unwrap();
        assert!(r.passes(1e-5), "{r:?}");
    }

    #[test]
    fn location_labels_are_clockwise_from_upper_left() {
        let rows: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let emb = Tensor::<f64>::new(&[9, 1], rows).unwrap();
        let (pairs, labels) = location_pairs(&emb).unwrap();
        assert_eq!(labels, (0..8).collect::<Vec<_>>());
        let p = pairs.to_vec();
        let neighbors: Vec<f64> = p.chunks(2).map(|c| c[1]).collect();
        assert_eq!(neighbors, vec![0., 1., 2., 5., 8., 7., 6., 3.]);
        assert!(p.chunks(2).all(|c| c[0] == 4.0));
    }

    #[test]
    fn patch_branch_merging() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row = noise(&mut rng, 4);
        let same = Tensor::<f64>::new(&[9, 4], row.repeat(9)).unwrap();
        let merged = merge_patch_embeddings(&same).unwrap().to_vec();
        for (a, b) in merged.iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }

        let emb = Tensor::<f64>::new(&[18, 4], noise(&mut rng, 72)).unwrap();
        let merged = merge_patch_embeddings(&emb).unwrap().to_vec();
        let data = emb.to_vec();
        for b in 0..2 {
            for j in 0..4 {
                let direct: f64 = (0..9).map(|p| data[(b * 9 + p) * 4 + j]).sum::<f64>() / 9.0;
                assert!((merged[b * 4 + j] - direct).abs() < 1e-9);
            }
        }

        let cc = CosineClassifier::<f64>::new(8, 4, 0.0, &mut rng).unwrap();
        let l = patch_branch_loss_from_embeddings(&emb, &cc, &[1, 7]).unwrap().item();
        assert!((l - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn patch_branch_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = Backbone::<f64>::new(1, &[3, 4], &[3], &mut rng).unwrap();
        let cc = CosineClassifier::<f64>::new(3, 4, 10.0, &mut rng).unwrap();
        let g = grids(&mut rng, 2);
        let mut inputs = net.kernels().to_vec();
        inputs.push(cc.weight.clone());
        let r = check_gradients(&inputs, |_| patch_branch_loss(&g, &net, &cc, &[2, 0]), 1e-5).unwrap();
        assert!(r.passes(1e-5), "{r:?}");
    }

    #[test]
    fn greedy_small_case() {
        let set = greedy_permutation_set(3, 2, &[0, 1, 2]).unwrap();
        assert_eq!(set.perms, vec![vec![0, 1, 2], vec![1, 2, 0]]);
        assert_eq!(hamming(&set.perms[0], &set.perms[1]), 3);
        assert_eq!(hamming(&[2, 0, 1], &[2, 0, 1]), 0);
        assert!(matches!(greedy_permutation_set(3, 7, &[0, 1, 2]), Err(Error::Capacity(_))));
        assert!(matches!(generate_permutation_set(4, 25, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn greedy_steps_are_optimal_for_four() {
        for seed in 0..3 {
            let set = generate_permutation_set(4, 8, seed).unwrap();
            let all: Vec<Vec<usize>> = {
                let mut v = Vec::new();
                for a in 0..4 {
                    for b in 0..4 {
                        for c in 0..4 {
                            for d in 0..4 {
                                let p = vec![a, b, c, d];
                                let mut s = p.clone();
                                s.sort();
                                if s == [0, 1, 2, 3] {
                                    v.push(p);
                                }
                            }
                        }
                    }
                }
                v
            };
            for i in 1..8 {
                let score = |p: &Vec<usize>| set.perms[..i].iter().map(|q| hamming(p, q)).sum::<usize>() as f64 / i as f64;
                let best = all.iter().filter(|p| !set.perms[..i].contains(p)).map(score).fold(f64::MIN, f64::max);
                assert_eq!(score(&set.perms[i]), best, "step {i}");
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let set = generate_permutation_set(5, 6, 42).unwrap();
        let text = set.to_text();
        assert!(text.starts_with("# n=5 count=6 seed=42\n"));
        assert_eq!(PermutationSet::from_text(&text).unwrap(), set);
        assert!(PermutationSet::from_text("# n=3 count=1 seed=0\n0 0 1\n").is_err());
    }

    #[test]
    fn jigsaw_uniform_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = generate_permutation_set(9, 64, 3).unwrap();
        let emb = Tensor::<f64>::new(&[18, 2], noise(&mut rng, 36)).unwrap();
        let choices = sample_permutation_choices(2, &set, false, &mut rng);
        let l = jigsaw_loss_from_embeddings(&emb, &set, &LinearHead::zeros(18, 64).unwrap(), &choices).unwrap().item();
        assert!((l - 64f64.ln()).abs() < 1e-12);

        let identity = PermutationSet { n: 9, perms: vec![(0..9).collect()], seed: None };
        let (inputs, targets) = jigsaw_inputs(&emb, &identity, &[vec![0], vec![0]]).unwrap();
        assert_eq!(targets, vec![0, 0]);
        assert_eq!(inputs.to_vec(), emb.to_vec());

        let p = set.get(17).unwrap().to_vec();
        let (shuffled, _) = jigsaw_inputs(&emb, &set, &[vec![17], vec![17]]).unwrap();
        let back = shuffled
            .reshape(&[18, 2])
            .unwrap()
            .gather_rows(&permuted_rows(&[&inverse_permutation(&p), &inverse_permutation(&p)]))
            .unwrap();
        assert_eq!(back.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), emb.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let bad = jigsaw_inputs(&emb, &set, &[vec![64], vec![0]]);
        assert!(matches!(bad, Err(Error::Index(_))));
    }

    #[test]
    fn jigsaw_all_perms_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let set = generate_permutation_set(9, 64, 1).unwrap();
        let emb = Tensor::<f64>::new(&[9, 2], noise(&mut rng, 18)).unwrap();
        let choices = sample_permutation_choices(1, &set, true, &mut rng);
        let (inputs, targets) = jigsaw_inputs(&emb, &set, &choices).unwrap();
        assert_eq!(inputs.shape(), &[64, 18]);
        assert_eq!(targets, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn jigsaw_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = Backbone::<f64>::new(1, &[2, 3], &[3], &mut rng).unwrap();
        let set = generate_permutation_set(9, 8, 0).unwrap();
        let head = LinearHead::<f64>::new(27, 8, &mut rng).unwrap();
        let g = grids(&mut rng, 2);
        let mut inputs = net.kernels().to_vec();
        inputs.push(head.weight.clone());
        let r = check_gradients(
            &inputs,
            |_| jigsaw_loss(&g, &set, &net, &head, false, &mut ChaCha8Rng::seed_from_u64(0)),
            1e-5,
        )
        .unwrap();
        assert!(r.passes(1e-5), "{r:?}");
    }
}
