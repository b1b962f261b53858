//! Classification maps as binary PPM (`P6`) images.

use std::collections::BTreeMap;

use crate::data::{LabelMap, Palette};
use crate::error::{Error, Result};

/// Encode a label map; `ignore` pixels are black.
pub fn render_ppm(labels: &LabelMap, palette: &Palette, ignore: i64) -> Result<Vec<u8>> {
    let mut out = format!("P6\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    for &l in &labels.data {
        if l == ignore {
            out.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let rgb = palette
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("no palette entry for class {l}")))?;
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

/// Decode a `P6` image with maxval 255 into `(width, height, rgb)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::InvalidArgument(format!("PPM: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..i])
                .map_err(|_| bad("header is not ASCII"))?
                .to_string(),
        );
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 images are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    i += 1; // single whitespace after maxval
    let body = bytes.get(i..).ok_or_else(|| bad("missing pixel data"))?;
    if body.len() != w * h * 3 {
        return Err(bad(&format!("expected {} pixel bytes, got {}", w * h * 3, body.len())));
    }
    Ok((w, h, body.to_vec()))
}

/// Invert [`render_ppm`] for an injective palette; black maps to `ignore`.
pub fn labels_from_ppm(bytes: &[u8], palette: &Palette, ignore: i64) -> Result<LabelMap> {
    let (w, h, rgb) = parse_ppm(bytes)?;
    let mut inverse: BTreeMap<[u8; 3], i64> = BTreeMap::new();
    for (&id, &c) in &palette.colors {
        if inverse.insert(c, id).is_some() {
            return Err(Error::InvalidArgument(format!(
                "palette colour {c:?} is used by more than one class"
            )));
        }
    }
    let data = rgb
        .chunks(3)
        .map(|px| {
            let c = [px[0], px[1], px[2]];
            match inverse.get(&c) {
                Some(&id) => Ok(id),
                None if c == [0, 0, 0] => Ok(ignore),
                None => Err(Error::InvalidArgument(format!("colour {c:?} is not in the palette"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_green_pixel() {
        let p = Palette::parse("0,0,128,0").unwrap();
        let img = render_ppm(&LabelMap::new(1, 1, vec![0]).unwrap(), &p, -1).unwrap();
        assert_eq!(img, b"P6\n1 1\n255\n\x00\x80\x00".to_vec());
    }

    #[test]
    fn ignore_is_black_and_missing_entry_fails() {
        let p = Palette::generate(2);
        let img = render_ppm(&LabelMap::filled(2, 2, -1), &p, -1).unwrap();
        assert!(img[img.len() - 12..].iter().all(|&b| b == 0));
        assert!(render_ppm(&LabelMap::filled(1, 1, 5), &p, -1).is_err());
    }

    #[test]
    fn round_trip() {
        let p = Palette::generate(4);
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, -1, 1]).unwrap();
        let img = render_ppm(&l, &p, -1).unwrap();
        assert_eq!(labels_from_ppm(&img, &p, -1).unwrap(), l);
    }
}
