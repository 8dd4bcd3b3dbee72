//! Bit-packed binary-code gallery with exhaustive popcount Hamming scan
//! and top-k retrieval.
//!
//! The design is deliberately an exhaustive scan: a 300K x 256-bit gallery
//! is under 10 MB of sequential memory, and a single sweep with native
//! popcount beats fancy indexing at this scale.

use std::collections::BinaryHeap;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::crl::BinaryCode;
use crate::detector::BoundingBox;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TATIDX01";
const VERSION: u16 = 1;

/// Popcount of the bytewise XOR of two equal-length codes.
pub fn hamming(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    a.hamming(b)
}

/// One gallery image: id plus its detections' boxes and codes.
#[derive(Clone, Debug)]
pub struct GalleryEntry {
    pub image_id: String,
    pub detections: Vec<(BoundingBox, BinaryCode)>,
}

/// Immutable code gallery. Codes are flattened into u64 words for the
/// scan; insertion order is preserved and breaks distance ties.
pub struct GalleryIndex {
    code_bits: usize,
    words_per_code: usize,
    entries: Vec<GalleryEntry>,
    flat: Vec<u64>,
    code_offsets: Vec<usize>,
}

/// Ranked retrieval outcome: distances non-decreasing, image ids distinct.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub ranked: Vec<(String, u32)>,
}

fn pack_words(code: &BinaryCode, words_per_code: usize, out: &mut Vec<u64>) {
    let bytes = code.as_bytes();
    for w in 0..words_per_code {
        let mut word = [0u8; 8];
        let start = w * 8;
        let end = (start + 8).min(bytes.len());
        if start < end {
            word[..end - start].copy_from_slice(&bytes[start..end]);
        }
        out.push(u64::from_le_bytes(word));
    }
}

impl GalleryIndex {
    pub fn build(entries: Vec<GalleryEntry>) -> Result<GalleryIndex> {
        if entries.is_empty() {
            return Err(Error::Input("gallery index needs at least one image".into()));
        }
        let code_bits = entries
            .iter()
            .flat_map(|e| e.detections.iter())
            .map(|(_, c)| c.len_bits())
            .next()
            .ok_or_else(|| Error::Input("gallery index needs at least one code".into()))?;
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Input(format!("duplicate image id '{}'", e.image_id)));
            }
            for (_, code) in &e.detections {
                if code.len_bits() != code_bits {
                    return Err(Error::Dimension(format!(
                        "mixed code lengths: {} and {} bits",
                        code_bits,
                        code.len_bits()
                    )));
                }
            }
        }
        drop(seen);
        let words_per_code = code_bits.div_ceil(64);
        let total: usize = entries.iter().map(|e| e.detections.len()).sum();
        let mut flat = Vec::with_capacity(total * words_per_code);
        let mut code_offsets = Vec::with_capacity(entries.len() + 1);
        code_offsets.push(0);
        for e in &entries {
            for (_, code) in &e.detections {
                pack_words(code, words_per_code, &mut flat);
            }
            code_offsets.push(code_offsets.last().unwrap() + e.detections.len());
        }
        Ok(GalleryIndex { code_bits, words_per_code, entries, flat, code_offsets })
    }

    pub fn code_bits(&self) -> usize {
        self.code_bits
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_codes(&self) -> usize {
        *self.code_offsets.last().unwrap()
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    /// Top-k by per-image min distance over (query code x image codes).
    /// Ties break by gallery insertion order.
    pub fn search(&self, query_codes: &[BinaryCode], k: usize) -> Result<SearchResult> {
        if query_codes.is_empty() {
            return Err(Error::Match("search requires at least one query code".into()));
        }
        if k == 0 {
            return Err(Error::Input("search requires k >= 1".into()));
        }
        for q in query_codes {
            if q.len_bits() != self.code_bits {
                return Err(Error::Dimension(format!(
                    "query code has {} bits, index stores {}",
                    q.len_bits(),
                    self.code_bits
                )));
            }
        }
        let mut packed_queries = Vec::with_capacity(query_codes.len() * self.words_per_code);
        for q in query_codes {
            pack_words(q, self.words_per_code, &mut packed_queries);
        }

        // Bounded max-heap of (distance, insertion order).
        let mut heap: BinaryHeap<(u32, usize)> = BinaryHeap::with_capacity(k + 1);
        let wpc = self.words_per_code;
        for (img_idx, window) in self.code_offsets.windows(2).enumerate() {
            let (start, end) = (window[0], window[1]);
            if start == end {
                continue; // image indexed without codes can never match
            }
            let mut best = u32::MAX;
            for code_idx in start..end {
                let gallery = &self.flat[code_idx * wpc..(code_idx + 1) * wpc];
                for q in packed_queries.chunks_exact(wpc) {
                    let mut d = 0u32;
                    for (a, b) in gallery.iter().zip(q) {
                        d += (a ^ b).count_ones();
                    }
                    if d < best {
                        best = d;
                    }
                }
            }
            heap.push((best, img_idx));
            if heap.len() > k {
                heap.pop();
            }
        }
        let mut ranked: Vec<(u32, usize)> = heap.into_vec();
        ranked.sort_unstable();
        Ok(SearchResult {
            ranked: ranked
                .into_iter()
                .map(|(d, i)| (self.entries[i].image_id.clone(), d))
                .collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.code_bits as u16).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            let id = e.image_id.as_bytes();
            if id.len() > u16::MAX as usize {
                return Err(Error::Format(format!("image id too long: {}", e.image_id)));
            }
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id)?;
            w.write_all(&(e.detections.len() as u16).to_le_bytes())?;
            for (bbox, code) in &e.detections {
                for v in [bbox.u, bbox.v, bbox.w, bbox.h] {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
                w.write_all(code.as_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GalleryIndex> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic in {}: expected TATIDX01", path.display())));
        }
        let version = read_u16(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let code_bits = read_u16(&mut r)? as usize;
        if code_bits == 0 {
            return Err(Error::Format("index declares zero-bit codes".into()));
        }
        let count = read_u64(&mut r)? as usize;
        let code_bytes = code_bits.div_ceil(8);
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = read_u16(&mut r)? as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id)?;
            let image_id =
                String::from_utf8(id).map_err(|_| Error::Format("image id is not UTF-8".into()))?;
            let det_count = read_u16(&mut r)? as usize;
            let mut detections = Vec::with_capacity(det_count);
            for _ in 0..det_count {
                let mut nums = [0.0f32; 4];
                let mut buf = [0u8; 4];
                for n in &mut nums {
                    r.read_exact(&mut buf)?;
                    *n = f32::from_le_bytes(buf);
                }
                let mut code = vec![0u8; code_bytes];
                r.read_exact(&mut code)?;
                detections.push((
                    BoundingBox::new(nums[0] as f64, nums[1] as f64, nums[2] as f64, nums[3] as f64),
                    BinaryCode::from_bytes(code, code_bits)?,
                ));
            }
            entries.push(GalleryEntry { image_id, detections });
        }
        GalleryIndex::build(entries)
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code(rng: &mut ChaCha8Rng, bits: usize) -> BinaryCode {
        let v: Vec<bool> = (0..bits).map(|_| rng.gen()).collect();
        BinaryCode::from_bits(&v).unwrap()
    }

    fn bb() -> BoundingBox {
        BoundingBox::new(1.0, 2.0, 3.0, 4.0)
    }

    #[test]
    fn hamming_examples() {
        let a = BinaryCode::from_bytes(vec![0xff], 8).unwrap();
        let b = BinaryCode::from_bytes(vec![0x00], 8).unwrap();
        assert_eq!(hamming(&a, &a).unwrap(), 0);
        assert_eq!(hamming(&a, &b).unwrap(), 8);
    }

    #[test]
    fn hamming_256_matches_bit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let a = code(&mut rng, 256);
            let b = code(&mut rng, 256);
            let expected = (0..256).filter(|&k| a.bit(k) != b.bit(k)).count() as u32;
            assert_eq!(hamming(&a, &b).unwrap(), expected);
        }
    }

    #[test]
    fn build_counts_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = GalleryIndex::build(vec![GalleryEntry {
            image_id: "a".into(),
            detections: vec![(bb(), code(&mut rng, 16))],
        }])
        .unwrap();
        assert_eq!(idx.total_codes(), 1);

        let entries: Vec<GalleryEntry> = (0..3)
            .map(|i| GalleryEntry {
                image_id: format!("img{i}"),
                detections: (0..=i).map(|_| (bb(), code(&mut rng, 16))).collect(),
            })
            .collect();
        let idx = GalleryIndex::build(entries).unwrap();
        assert_eq!(idx.total_codes(), 6);

        let dup = vec![
            GalleryEntry { image_id: "x".into(), detections: vec![(bb(), code(&mut rng, 16))] },
            GalleryEntry { image_id: "x".into(), detections: vec![(bb(), code(&mut rng, 16))] },
        ];
        assert!(matches!(GalleryIndex::build(dup), Err(Error::Input(_))));

        let mixed = vec![GalleryEntry {
            image_id: "x".into(),
            detections: vec![(bb(), code(&mut rng, 16)), (bb(), code(&mut rng, 24))],
        }];
        assert!(matches!(GalleryIndex::build(mixed), Err(Error::Dimension(_))));
    }

    #[test]
    fn search_exact_match_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = code(&mut rng, 64);
        let entries: Vec<GalleryEntry> = (0..10)
            .map(|i| GalleryEntry {
                image_id: format!("img{i}"),
                detections: vec![(bb(), if i == 7 { target.clone() } else { code(&mut rng, 64) })],
            })
            .collect();
        let idx = GalleryIndex::build(entries).unwrap();
        let res = idx.search(&[target], 3).unwrap();
        assert_eq!(res.ranked[0], ("img7".to_string(), 0));
        assert!(res.ranked.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn search_k_larger_than_gallery_gives_full_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let entries: Vec<GalleryEntry> = (0..5)
            .map(|i| GalleryEntry {
                image_id: format!("img{i}"),
                detections: vec![(bb(), code(&mut rng, 32))],
            })
            .collect();
        let idx = GalleryIndex::build(entries).unwrap();
        let res = idx.search(&[code(&mut rng, 32)], 100).unwrap();
        assert_eq!(res.ranked.len(), 5);
    }

    #[test]
    fn search_matches_exhaustive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _trial in 0..20 {
            let entries: Vec<GalleryEntry> = (0..200)
                .map(|i| GalleryEntry {
                    image_id: format!("img{i:03}"),
                    detections: (0..rng.gen_range(1..4)).map(|_| (bb(), code(&mut rng, 64))).collect(),
                })
                .collect();
            let queries: Vec<BinaryCode> = (0..2).map(|_| code(&mut rng, 64)).collect();
            let idx = GalleryIndex::build(entries.clone()).unwrap();
            let got = idx.search(&queries, 200).unwrap();

            // Brute force: double loop over all pairs, stable sort by
            // (distance, insertion order).
            let mut expected: Vec<(String, u32)> = entries
                .iter()
                .map(|e| {
                    let mut best = u32::MAX;
                    for (_, g) in &e.detections {
                        for q in &queries {
                            best = best.min(q.hamming(g).unwrap());
                        }
                    }
                    (e.image_id.clone(), best)
                })
                .collect();
            let mut order: Vec<usize> = (0..expected.len()).collect();
            order.sort_by_key(|&i| (expected[i].1, i));
            expected = order.into_iter().map(|i| expected[i].clone()).collect();
            assert_eq!(got.ranked, expected);
        }
    }

    #[test]
    fn adding_distracters_never_improves_existing_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let base: Vec<GalleryEntry> = (0..50)
            .map(|i| GalleryEntry {
                image_id: format!("img{i}"),
                detections: vec![(bb(), code(&mut rng, 32))],
            })
            .collect();
        let query = vec![code(&mut rng, 32)];
        let idx = GalleryIndex::build(base.clone()).unwrap();
        let before = idx.search(&query, 50).unwrap();
        let mut extended = base;
        extended.extend((0..50).map(|i| GalleryEntry {
            image_id: format!("dis{i}"),
            detections: vec![(bb(), code(&mut rng, 32))],
        }));
        let after = GalleryIndex::build(extended).unwrap().search(&query, 100).unwrap();
        let dist_after: std::collections::HashMap<&str, u32> =
            after.ranked.iter().map(|(id, d)| (id.as_str(), *d)).collect();
        for (id, d) in &before.ranked {
            assert_eq!(dist_after[id.as_str()], *d);
        }
    }

    #[test]
    fn file_round_trip_is_byte_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let entries: Vec<GalleryEntry> = (0..17)
            .map(|i| GalleryEntry {
                image_id: format!("image_{i}"),
                detections: (0..rng.gen_range(0..3))
                    .map(|_| {
                        (
                            BoundingBox::new(
                                rng.gen_range(0.0..100.0f64),
                                rng.gen_range(0.0..100.0f64),
                                rng.gen_range(1.0..50.0f64),
                                rng.gen_range(1.0..50.0f64),
                            ),
                            code(&mut rng, 50),
                        )
                    })
                    .collect(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tidx");
        let p2 = dir.path().join("b.tidx");
        let idx = GalleryIndex::build(entries).unwrap();
        idx.save(&p1).unwrap();
        let loaded = GalleryIndex::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // Scan results identical after the round trip.
        let mut rng2 = ChaCha8Rng::seed_from_u64(24);
        let q = vec![code(&mut rng2, 50)];
        assert_eq!(idx.search(&q, 17).unwrap(), loaded.search(&q, 17).unwrap());
    }

    #[test]
    fn empty_query_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx = GalleryIndex::build(vec![GalleryEntry {
            image_id: "a".into(),
            detections: vec![(bb(), code(&mut rng, 8))],
        }])
        .unwrap();
        assert!(matches!(idx.search(&[], 5), Err(Error::Match(_))));
    }
}
