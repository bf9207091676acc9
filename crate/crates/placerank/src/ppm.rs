//! Binary 8-bit PPM (`P6`) images.

use std::path::Path;

use placerank_core::image::Image;

use crate::error::{io_at, Error, Result};

pub fn encode(img: &Image) -> Vec<u8> {
    assert_eq!(img.channels, 3, "PPM needs three channels");
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.to_u8());
    out
}

fn bad(path: &Path, offset: usize, reason: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, pos, "truncated header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P6" {
        return Err(bad(path, 0, "not a binary PPM (P6)"));
    }
    let num = |(at, s): (usize, &str)| s.parse::<usize>().map_err(|_| bad(path, at, "bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad(path, fields[3].0, "only 8-bit PPM is supported"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad(path, bytes.len(), "truncated pixel data"));
    }
    Ok(Image::from_u8(h, w, 3, &bytes[pos..pos + need])?)
}

pub fn save(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(io_at(path))
}

pub fn load(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_of_quantized_image() {
        let data: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::from_u8(4, 5, 3, &data).unwrap();
        let back = decode(&encode(&img), Path::new("x")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 128]);
        let img = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(img.to_u8(), vec![255, 0, 128]);
        assert!(decode(b"P3\n1 1\n255\n", Path::new("x")).is_err());
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }
}
