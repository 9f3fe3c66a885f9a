#![no_main]

use fedldf_core::datasets::{dataset_from_idx, idx};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = idx::parse_images(data) {
        assert_eq!(images.pixels.len(), images.count * images.image_len());
        let labels = vec![0u8; images.count];
        if images.count > 0 && images.image_len() > 0 {
            let ds = dataset_from_idx(&images, &labels).unwrap();
            assert!(ds.inputs().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let encoded = idx::encode_images(
            images.rows,
            images.cols,
            &images.pixels.chunks(images.image_len().max(1)).map(<[u8]>::to_vec).collect::<Vec<_>>(),
        );
        if images.image_len() > 0 {
            assert_eq!(encoded, data);
        }
    }
});
