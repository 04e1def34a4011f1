use proptest::prelude::*;
use texturegan::colorkit::{srgb_to_lab, RgbImage};
use texturegan::datagen::{BinaryMap, COLOR_A, COLOR_B, COLOR_SENTINEL, SKETCH, TEX_INTENSITY, TEX_MASK};
use texturegan::infer::{build_input, ColorPatch, ColorSource, Rect, SynthesisRequest, TexturePatch};

const RES: usize = 24;

fn rect() -> impl Strategy<Value = Rect> {
    (0..RES - 1, 0..RES - 1)
        .prop_flat_map(|(x, y)| (Just(x), Just(y), 1..=RES - x, 1..=RES - y))
        .prop_map(|(x, y, w, h)| Rect::new(x, y, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn last_paste_wins_and_stack_is_valid(
        textures in prop::collection::vec((rect(), 0u8..=255), 0..4),
        colors in prop::collection::vec((rect(), any::<[u8; 3]>()), 0..4),
        strokes in prop::collection::vec((0..RES, 0..RES), 0..30),
    ) {
        let mut sketch = BinaryMap::zeros(RES, RES);
        for (x, y) in &strokes {
            sketch.set(*x, *y, true);
        }
        let mut req = SynthesisRequest::new(sketch.clone(), RES);
        for (r, gray) in &textures {
            let v = f32::from(*gray) / 255.0;
            req.texture_patches.push(TexturePatch { image: RgbImage::filled(3, 2, [v; 3]), rect: *r });
        }
        for (r, c) in &colors {
            req.color_patches.push(ColorPatch { source: ColorSource::Rgb(*c), rect: *r });
        }
        let stack = build_input(&req).unwrap();
        stack.validate().unwrap();

        let inside = |r: &Rect, x: usize, y: usize| x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h;
        for y in 0..RES {
            for x in 0..RES {
                let i = y * RES + x;
                prop_assert_eq!(stack.channel(SKETCH)[i] == 1.0, sketch.get(x, y));
                match textures.iter().rev().find(|(r, _)| inside(r, x, y)) {
                    Some((_, gray)) => {
                        let g = f64::from(*gray) / 255.0;
                        let want = srgb_to_lab([g; 3])[0] / 100.0;
                        prop_assert_eq!(stack.channel(TEX_MASK)[i], 1.0);
                        prop_assert!((f64::from(stack.channel(TEX_INTENSITY)[i]) - want).abs() < 1e-5);
                    }
                    None => {
                        prop_assert_eq!(stack.channel(TEX_MASK)[i], 0.0);
                        prop_assert_eq!(stack.channel(TEX_INTENSITY)[i], 0.0);
                    }
                }
                match colors.iter().rev().find(|(r, _)| inside(r, x, y)) {
                    Some((_, c)) => {
                        let lab = srgb_to_lab(c.map(|v| f64::from(v) / 255.0));
                        prop_assert!((f64::from(stack.channel(COLOR_A)[i]) - lab[1] / 128.0).abs() < 1e-5);
                        prop_assert!((f64::from(stack.channel(COLOR_B)[i]) - lab[2] / 128.0).abs() < 1e-5);
                    }
                    None => {
                        prop_assert_eq!(stack.channel(COLOR_A)[i], COLOR_SENTINEL);
                        prop_assert_eq!(stack.channel(COLOR_B)[i], COLOR_SENTINEL);
                    }
                }
            }
        }
    }
}
