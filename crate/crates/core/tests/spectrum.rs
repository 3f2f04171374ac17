use codebook_iqa::codebook::eigen_spectrum;
use codebook_iqa::preprocess::{extract_raw_luma, item_seed, DescriptorMatrix, RgbRaster};
use codebook_iqa::rng::{derive_seed, Stream};
use codebook_iqa::synthgen::{generate_image, ColorModel, SynthParams};

/// Share of the spectrum held by the smaller half of the eigenvalues.
fn tail_share(gamma: f64) -> f64 {
    let parts: Vec<DescriptorMatrix> = (0..6)
        .map(|i| {
            let params = SynthParams {
                gamma,
                color_model: ColorModel::Greyscale,
                seed: derive_seed(11, Stream::Synth, i),
                ..SynthParams::default()
            };
            let image = RgbRaster::from_grey(&generate_image(&params).unwrap());
            extract_raw_luma(&image, 8, 2048, item_seed(11, i)).unwrap()
        })
        .collect();
    let values = eigen_spectrum(&DescriptorMatrix::concat(&parts).unwrap(), true).unwrap();
    let total: f64 = values.iter().sum();
    values[values.len() / 2..].iter().sum::<f64>() / total
}

#[test]
fn smaller_objects_flatten_the_spectrum() {
    let (steep, shallow) = (tail_share(3.5), tail_share(2.5));
    assert!(steep > shallow, "tail share at 3.5 = {steep}, at 2.5 = {shallow}");
}
