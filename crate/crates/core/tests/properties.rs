//! Property-based invariants over the analysis, metrics, extraction, and
//! trace layers.

use std::collections::BTreeSet;

use proptest::prelude::*;

use hitzero_core::analysis::{olvar_rows, select_topk_hits, top_k_row, TextToImageRow};
use hitzero_core::extraction::extract_object_mentions;
use hitzero_core::metrics::roc_pr_curves;
use hitzero_core::trace;
use hitzero_core::vocab::builtin_vocabulary;
use hitzero_core::PatchSet;

fn row(scores: Vec<f64>) -> TextToImageRow {
    TextToImageRow {
        query_pos: 0,
        scores,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Permutation equivariance of top-K selection when scores are distinct.
    #[test]
    fn topk_permutation_equivariant(
        base in prop::collection::vec(0.0f64..1.0, 4..40),
        k in 1usize..8,
        seed in any::<u64>(),
    ) {
        // Force distinct scores so tie-breaking cannot differ.
        let scores: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, v)| v + i as f64 * 2.0)
            .collect();
        let mut perm: Vec<usize> = (0..scores.len()).collect();
        // Seeded Fisher-Yates.
        let mut state = seed;
        for i in (1..perm.len()).rev() {
            state = hitzero_core::seeds::splitmix64(state);
            perm.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let selected: BTreeSet<usize> = top_k_row(&scores, k).into_iter().collect();
        let selected_perm: BTreeSet<usize> = top_k_row(&permuted, k).into_iter().collect();
        let mapped: BTreeSet<usize> = selected_perm.into_iter().map(|j| perm[j]).collect();
        prop_assert_eq!(selected, mapped);
    }

    /// Raising a selected score never evicts it from the selection.
    #[test]
    fn topk_monotone_under_raising(
        scores in prop::collection::vec(0.0f64..1.0, 2..40),
        k in 1usize..8,
        pick in any::<prop::sample::Index>(),
        delta in 0.01f64..5.0,
    ) {
        let selected = top_k_row(&scores, k);
        let chosen = selected[pick.index(selected.len())];
        let mut raised = scores.clone();
        raised[chosen] += delta;
        let after: BTreeSet<usize> = top_k_row(&raised, k).into_iter().collect();
        prop_assert!(after.contains(&chosen));
    }

    /// Selection size: exactly min(K, N) for one row; bounded union for many.
    #[test]
    fn topk_size_contract(
        scores in prop::collection::vec(0.0f64..1.0, 1..30),
        extra in prop::collection::vec(0.0f64..1.0, 1..30),
        k in 1usize..10,
    ) {
        let n = scores.len().min(extra.len());
        let rows = vec![row(scores[..n].to_vec()), row(extra[..n].to_vec())];
        let single = select_topk_hits(&rows[..1], k).unwrap();
        prop_assert_eq!(single.len(), k.min(n));
        let union = select_topk_hits(&rows, k).unwrap();
        prop_assert!(union.len() <= 2 * k.min(n));
        prop_assert!(union.len() >= k.min(n));
    }

    /// OL-VAR additivity over disjoint boxes.
    #[test]
    fn olvar_disjoint_additivity(
        scores in prop::collection::vec(0.0f64..1.0, 4..64),
        mask in prop::collection::vec(0u8..3, 4..64),
    ) {
        let n = scores.len().min(mask.len());
        let rows = vec![row(scores[..n].to_vec())];
        let a: PatchSet = (0..n).filter(|&i| mask[i] == 0).collect();
        let b: PatchSet = (0..n).filter(|&i| mask[i] == 1).collect();
        let ab: PatchSet = a.union(&b).copied().collect();
        let va = olvar_rows(&rows, &a).unwrap().value;
        let vb = olvar_rows(&rows, &b).unwrap().value;
        let vab = olvar_rows(&rows, &ab).unwrap().value;
        prop_assert!((va + vb - vab).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&vab));
    }

    /// Metric permutation invariance: shuffling (score, label) pairs
    /// changes neither curve nor AUC.
    #[test]
    fn curves_permutation_invariant(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 4..60),
        seed in any::<u64>(),
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let mut perm: Vec<usize> = (0..pairs.len()).collect();
        let mut state = seed;
        for i in (1..perm.len()).rev() {
            state = hitzero_core::seeds::splitmix64(state);
            perm.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let scores_p: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let labels_p: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
        let (roc_a, pr_a) = roc_pr_curves(&scores, &labels).unwrap();
        let (roc_b, pr_b) = roc_pr_curves(&scores_p, &labels_p).unwrap();
        prop_assert_eq!(roc_a, roc_b);
        prop_assert_eq!(pr_a, pr_b);
    }

    /// A caption built from k known surface forms, separated by filler,
    /// extracts exactly k mentions of the right classes. Without the
    /// separator adjacent forms could legitimately merge into a longer
    /// registered form.
    #[test]
    fn render_extract_roundtrip(picks in prop::collection::vec(any::<prop::sample::Index>(), 1..8)) {
        let (tok, vocab) = builtin_vocabulary();
        let and = tok.lookup_word("and").unwrap();
        let forms: Vec<(Vec<hitzero_core::TokenId>, hitzero_core::ClassId)> = vocab
            .surface_forms()
            .map(|(f, c)| (f.clone(), c))
            .collect();
        let mut caption = Vec::new();
        let mut expected = Vec::new();
        for pick in &picks {
            let (form, class) = &forms[pick.index(forms.len())];
            if !caption.is_empty() {
                caption.push(and);
            }
            caption.extend_from_slice(form);
            expected.push(*class);
        }
        let mentions = extract_object_mentions(&caption, &vocab);
        let classes: Vec<_> = mentions.iter().map(|m| m.class).collect();
        prop_assert_eq!(classes, expected);
    }

    /// The trace reader is total on arbitrary bytes.
    #[test]
    fn trace_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = trace::decode(&bytes);
    }
}
