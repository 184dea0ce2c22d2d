//! Proposal cache: `SCNNPRP1` magic, then per image a little-endian record
//! `(image_index: u32, box_count: u32, box_count x [top, left, bottom, right]: u16)`.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::ProposalSet;
use crate::data::BoundingBox;
use crate::error::{Error, Result};

pub const PROPOSAL_MAGIC: &[u8; 8] = b"SCNNPRP1";

pub fn write_header(mut w: impl Write) -> std::io::Result<()> {
    w.write_all(PROPOSAL_MAGIC)
}

pub fn write_record(mut w: impl Write, set: &ProposalSet) -> Result<()> {
    let io = |e| Error::Contract(format!("writing proposal record: {e}"));
    w.write_u32::<LittleEndian>(set.image_index).map_err(io)?;
    w.write_u32::<LittleEndian>(set.boxes.len() as u32).map_err(io)?;
    for b in &set.boxes {
        for v in [b.top, b.left, b.bottom, b.right] {
            let v = u16::try_from(v)
                .map_err(|_| Error::Contract(format!("box coordinate {v} does not fit u16")))?;
            w.write_u16::<LittleEndian>(v).map_err(io)?;
        }
    }
    Ok(())
}

pub fn encode(sets: &[ProposalSet]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_header(&mut out).expect("writing to a Vec");
    for s in sets {
        write_record(&mut out, s)?;
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<ProposalSet>> {
    const WHAT: &str = "proposal cache";
    if bytes.len() < 8 || &bytes[..8] != PROPOSAL_MAGIC {
        return Err(Error::format(WHAT, 0, "missing SCNNPRP1 header"));
    }
    let mut cur = std::io::Cursor::new(&bytes[8..]);
    let mut sets = Vec::new();
    while (cur.position() as usize) < bytes.len() - 8 {
        let record = sets.len();
        let offset = cur.position() + 8;
        let truncated = |_| Error::format(WHAT, offset, format!("record {record} is truncated"));
        let image_index = cur.read_u32::<LittleEndian>().map_err(truncated)?;
        let count = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let remaining = bytes.len() - 8 - cur.position() as usize;
        if count * 8 > remaining {
            return Err(Error::format(
                WHAT,
                offset,
                format!("record {record} declares {count} boxes but only {remaining} bytes remain"),
            ));
        }
        let mut boxes = Vec::with_capacity(count);
        for _ in 0..count {
            let mut c = [0u16; 4];
            cur.read_u16_into::<LittleEndian>(&mut c).map_err(truncated)?;
            if c[0] > c[2] || c[1] > c[3] {
                return Err(Error::format(WHAT, offset, format!("record {record} has an inverted box {c:?}")));
            }
            boxes.push(BoundingBox::new(c[0] as usize, c[1] as usize, c[2] as usize, c[3] as usize));
        }
        sets.push(ProposalSet { image_index, boxes });
    }
    Ok(sets)
}

pub fn read(path: &std::path::Path) -> Result<Vec<ProposalSet>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, msg, .. } => Error::format(path.display().to_string(), offset, msg),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_set() -> impl Strategy<Value = ProposalSet> {
        (any::<u32>(), prop::collection::vec((0u16..500, 0u16..500, 0u16..500, 0u16..500), 0..6)).prop_map(|(i, raw)| {
            ProposalSet {
                image_index: i,
                boxes: raw
                    .into_iter()
                    .map(|(a, b, c, d)| {
                        BoundingBox::new(a.min(c) as usize, b.min(d) as usize, a.max(c) as usize, b.max(d) as usize)
                    })
                    .collect(),
            }
        })
    }

    proptest! {
        #[test]
        fn write_read_write_is_byte_identical(sets in prop::collection::vec(arb_set(), 0..5)) {
            let bytes = encode(&sets).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &sets);
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn truncation_reports_record_index() {
        let sets = vec![
            ProposalSet { image_index: 0, boxes: vec![BoundingBox::new(0, 0, 1, 1)] },
            ProposalSet { image_index: 1, boxes: vec![BoundingBox::new(0, 0, 2, 2); 3] },
        ];
        let bytes = encode(&sets).unwrap();
        match decode(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { msg, offset, .. }) => {
                assert!(msg.contains("record 1"), "{msg}");
                assert_eq!(offset, 8 + 8 + 8);
            }
            other => panic!("{other:?}"),
        }
        assert!(decode(b"NOTMAGIC").is_err());
        assert_eq!(decode(PROPOSAL_MAGIC).unwrap(), vec![]);
    }
}
