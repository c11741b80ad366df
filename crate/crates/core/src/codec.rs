//! File formats: 8-bit RGB PNG / binary PPM images in, PNG out; masks as 8-bit
//! grayscale PNG with values {0, 255}; artery/vein maps as indexed PNG.
//!
//! Encoding settings are fixed so equal rasters always produce equal bytes.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::model::{AvLabel, BinaryMask, FundusImage, GrayImage, Laterality, VesselMask};

/// Palette for the a/v map: 0 none (black), 1 artery (red), 2 vein (blue).
const AV_PALETTE: [u8; 9] = [0, 0, 0, 255, 0, 0, 0, 0, 255];

/// Decodes PNG or binary PPM bytes into a validated RGB image. Metadata
/// chunks are ignored; only pixel content survives ingest.
pub fn decode_image(bytes: &[u8], laterality: Laterality) -> Result<FundusImage> {
    let format = image::guess_format(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(Error::UnsupportedFormat(format!("{format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    match img {
        image::DynamicImage::ImageRgb8(buf) => {
            FundusImage::new(w, h, buf.into_raw(), laterality)
        }
        other => Err(Error::UnsupportedFormat(format!(
            "{:?}; only 8-bit RGB is accepted",
            other.color()
        ))),
    }
}

fn encode_png(
    width: u32,
    height: u32,
    color: png::ColorType,
    palette: Option<&[u8]>,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Adaptive);
        if let Some(p) = palette {
            enc.set_palette(p.to_vec());
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Encode(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Encode(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_rgb_png(img: &FundusImage) -> Result<Vec<u8>> {
    encode_png(img.width(), img.height(), png::ColorType::Rgb, None, img.pixels())
}

/// Binary PPM (P6) encoding.
pub fn encode_ppm(img: &FundusImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn encode_gray_png(g: &GrayImage) -> Result<Vec<u8>> {
    encode_png(g.width, g.height, png::ColorType::Grayscale, None, &g.pixels)
}

pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let data: Vec<u8> = mask
        .to_bools()
        .into_iter()
        .map(|b| if b { 255 } else { 0 })
        .collect();
    encode_png(
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        None,
        &data,
    )
}

pub fn encode_av_png(v: &VesselMask) -> Result<Vec<u8>> {
    let (w, h) = v.dims();
    let data: Vec<u8> = v.av().iter().map(|l| l.index()).collect();
    encode_png(w, h, png::ColorType::Indexed, Some(&AV_PALETTE), &data)
}

struct RawPng {
    width: u32,
    height: u32,
    color: png::ColorType,
    data: Vec<u8>,
}

fn decode_raw_png(bytes: &[u8]) -> Result<RawPng> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("png too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "{:?}-bit png",
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok(RawPng {
        width: info.width,
        height: info.height,
        color: info.color_type,
        data: buf,
    })
}

/// Reads an 8-bit grayscale mask PNG; any non-zero value is foreground.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    let raw = decode_raw_png(bytes)?;
    if raw.color != png::ColorType::Grayscale {
        return Err(Error::UnsupportedFormat(format!(
            "mask png must be grayscale, got {:?}",
            raw.color
        )));
    }
    let bits: Vec<bool> = raw.data.iter().map(|&v| v != 0).collect();
    BinaryMask::from_bools(raw.width, raw.height, &bits)
}

/// Reads an indexed a/v map; vessel bits are the non-zero indices.
pub fn decode_av_png(bytes: &[u8]) -> Result<VesselMask> {
    let raw = decode_raw_png(bytes)?;
    if raw.color != png::ColorType::Indexed && raw.color != png::ColorType::Grayscale {
        return Err(Error::UnsupportedFormat(format!(
            "a/v map must be indexed, got {:?}",
            raw.color
        )));
    }
    let labels = raw
        .data
        .iter()
        .map(|&i| AvLabel::from_index(i))
        .collect::<Result<Vec<_>>>()?;
    let bits: Vec<bool> = labels.iter().map(|&l| l != AvLabel::None).collect();
    VesselMask::new(BinaryMask::from_bools(raw.width, raw.height, &bits)?, labels)
}

/// Combines a vessel mask PNG with an a/v map PNG. Vessel pixels without an
/// a/v label stay unlabelled.
pub fn decode_vessel_pngs(mask_png: &[u8], av_png: &[u8]) -> Result<VesselMask> {
    let vessel = decode_mask_png(mask_png)?;
    let av = decode_av_png(av_png)?;
    vessel.check_same_dims(av.vessel())?;
    VesselMask::new(vessel, av.av().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Rgb;
    use proptest::prelude::*;

    fn noise_image(seed: u64, w: u32, h: u32) -> FundusImage {
        let mut s = seed | 1;
        FundusImage::from_fn(w, h, Laterality::Unknown, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            Rgb(s as u8, (s >> 8) as u8, (s >> 16) as u8)
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn image_png_and_ppm_round_trip(seed in any::<u64>(), w in 1u32..40, h in 1u32..40) {
            let img = noise_image(seed, w, h);
            let back = decode_image(&encode_rgb_png(&img).unwrap(), Laterality::Unknown).unwrap();
            prop_assert_eq!(back.pixels(), img.pixels());
            prop_assert_eq!(back.image_id(), img.image_id());
            let back = decode_image(&encode_ppm(&img), Laterality::Unknown).unwrap();
            prop_assert_eq!(back.pixels(), img.pixels());
        }

        #[test]
        fn mask_and_av_round_trip(seed in any::<u64>(), w in 1u32..40, h in 1u32..40) {
            let mut s = seed | 1;
            let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; s };
            let labels: Vec<AvLabel> = (0..w * h).map(|_| match next() % 3 {
                0 => AvLabel::None, 1 => AvLabel::Artery, _ => AvLabel::Vein,
            }).collect();
            let bits: Vec<bool> = labels.iter().map(|&l| l != AvLabel::None).collect();
            let v = VesselMask::new(BinaryMask::from_bools(w, h, &bits).unwrap(), labels).unwrap();
            let mask_png = encode_mask_png(v.vessel()).unwrap();
            prop_assert_eq!(&decode_mask_png(&mask_png).unwrap(), v.vessel());
            let av_png = encode_av_png(&v).unwrap();
            prop_assert_eq!(&decode_vessel_pngs(&mask_png, &av_png).unwrap(), &v);
        }
    }

    #[test]
    fn rejects_sixteen_bit() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 24]).unwrap();
        }
        assert!(matches!(
            decode_image(&out, Laterality::Unknown),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_image(b"not an image at all", Laterality::Unknown).is_err());
        let png = encode_rgb_png(&noise_image(3, 8, 8)).unwrap();
        assert!(decode_image(&png[..png.len() / 2], Laterality::Unknown).is_err());
    }

    #[test]
    fn mask_png_values_are_0_or_255() {
        let m = BinaryMask::from_fn(5, 3, |x, _| x % 2 == 0);
        let raw = decode_raw_png(&encode_mask_png(&m).unwrap()).unwrap();
        assert!(raw.data.iter().all(|&v| v == 0 || v == 255));
        assert_eq!(raw.color, png::ColorType::Grayscale);
    }
}
