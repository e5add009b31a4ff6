use featinv::analysis::{pairwise_squared_distances, squared_distance};
use featinv::dataset::{generate_shapes, ShapesConfig};
use featinv::extractor::{FeatureExtractor, PooledMeanExtractor};
use featinv::quantizer::{virtual_save, QuantizedImage};
use featinv::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn virtual_and_file_saves_agree() {
    let data = generate_shapes::<f32>(&ShapesConfig { count: 16, image_size: 32, channels: 3, seed: 5 }).unwrap();
    let ex = PooledMeanExtractor::new([3, 32, 32], 2).unwrap();
    let feats: Vec<_> = data.iter().map(|d| ex.extract(&virtual_save(&d.image).unwrap()).unwrap()).collect();
    let avg = pairwise_squared_distances("shapes", &feats).unwrap().average_pairwise;

    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (i, d) in data.iter().enumerate() {
        // off-grid input, slightly outside [-1, 1] in places
        let noisy = d.image.add(&Tensor::<f32>::randn(d.image.shape(), &mut rng).scale(0.05)).unwrap();
        let q = virtual_save(&noisy).unwrap();
        let path = dir.path().join(format!("{i}.png"));
        q.save_png(&path).unwrap();
        let back = QuantizedImage::<f32>::load_png(&path, 3).unwrap();
        assert_eq!(back.values(), q.values());
        let gap = squared_distance(&ex.extract(&q).unwrap(), &ex.extract(&back).unwrap()).unwrap() as f64;
        assert!(gap <= 0.01 * avg);
    }
}
