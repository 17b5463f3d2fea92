use rand::Rng;

/// Zero-pads an `h × w × c` image by `pad` on every side and crops a window
/// of the original size at a uniformly drawn offset.
pub fn pad_crop_augment<R: Rng>(image: &[f32], shape: [usize; 3], pad: usize, rng: &mut R) -> Vec<f32> {
    if pad == 0 {
        return image.to_vec();
    }
    let [h, w, c] = shape;
    let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let mut out = vec![0f32; image.len()];
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let s = (sy as usize * w + sx as usize) * c;
            let d = (y * w + x) * c;
            out[d..d + c].copy_from_slice(&image[s..s + c]);
        }
    }
    out
}
