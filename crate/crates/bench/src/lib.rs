//! Shared fixtures for the benchmarks.

use rangefuse::synth::{gen_set, random_group, SynthSet, SynthSpec};
use rangefuse::{
    estimate_lut, BinGroup, BinSpace, EmConfig, ImageTensor, ReferenceBatch, WeightLut,
};

/// A range-biased two-model set of `size`x`size` images.
pub fn biased_set(size: usize, num_ref: usize, num_test: usize) -> SynthSet {
    let spec = SynthSpec {
        height: size,
        width: size,
        num_ref,
        num_test,
        ..SynthSpec::range_biased(1, 24.0, 2.0)
    };
    gen_set(&spec).expect("valid spec")
}

pub fn reference_batch(set: &SynthSet) -> ReferenceBatch {
    ReferenceBatch::from_images(&set.reference.gt, &set.reference.preds).expect("aligned set")
}

pub fn lut_for(set: &SynthSet, bin_width: u32) -> WeightLut {
    let space = BinSpace::new(bin_width).expect("positive width");
    estimate_lut(&reference_batch(set), &space, &EmConfig::default()).expect("estimation succeeds")
}

/// Model predictions for test sample `n`.
pub fn test_sample(set: &SynthSet, n: usize) -> Vec<ImageTensor> {
    set.test.preds.iter().map(|p| p[n].clone()).collect()
}

pub fn em_group(num_models: usize, count: usize) -> BinGroup {
    random_group(99, num_models, count)
}
