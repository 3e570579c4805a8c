//! Minimal reader for MATLAB level-5 MAT files.
//!
//! Supports what the benchmark annotation files use: numeric arrays of any
//! real class, char arrays, cell arrays and struct arrays, optionally wrapped
//! in zlib-compressed elements. Sparse and complex data are rejected.

use std::io::Read;

use flate2::read::ZlibDecoder;

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;
const MI_UTF8: u32 = 16;
const MI_UTF16: u32 = 17;

const MX_CELL: u8 = 1;
const MX_STRUCT: u8 = 2;
const MX_OBJECT: u8 = 3;
const MX_CHAR: u8 = 4;
const MX_SPARSE: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum MatValue {
    Numeric { dims: Vec<usize>, data: Vec<f64> },
    Char { dims: Vec<usize>, chars: Vec<char> },
    Cell { dims: Vec<usize>, items: Vec<MatValue> },
    Struct {
        dims: Vec<usize>,
        fields: Vec<String>,
        /// One entry per array element (column-major), each holding one
        /// value per field.
        items: Vec<Vec<MatValue>>,
    },
    Empty,
}

impl MatValue {
    /// Number of array elements.
    pub fn len(&self) -> usize {
        match self {
            MatValue::Numeric { data, .. } => data.len(),
            MatValue::Char { chars, .. } => chars.len(),
            MatValue::Cell { items, .. } => items.len(),
            MatValue::Struct { items, .. } => items.len(),
            MatValue::Empty => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Text of a char row or column vector.
    pub fn as_string(&self) -> Option<String> {
        match self {
            MatValue::Char { chars, .. } => Some(chars.iter().collect()),
            MatValue::Empty => Some(String::new()),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            MatValue::Numeric { data, .. } if data.len() == 1 => Some(data[0]),
            _ => None,
        }
    }

    pub fn cell_items(&self) -> Option<&[MatValue]> {
        match self {
            MatValue::Cell { items, .. } => Some(items),
            MatValue::Empty => Some(&[]),
            _ => None,
        }
    }

    /// Field `name` of struct element `index`.
    pub fn field(&self, index: usize, name: &str) -> Option<&MatValue> {
        match self {
            MatValue::Struct { fields, items, .. } => {
                let f = fields.iter().position(|n| n == name)?;
                items.get(index)?.get(f)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    endian: Endian,
}

struct Element<'a> {
    dtype: u32,
    data: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn u32_at(&self, at: usize) -> Result<u32, String> {
        let b: [u8; 4] = self
            .buf
            .get(at..at + 4)
            .ok_or("unexpected end of data")?
            .try_into()
            .unwrap();
        Ok(match self.endian {
            Endian::Little => u32::from_le_bytes(b),
            Endian::Big => u32::from_be_bytes(b),
        })
    }

    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn next_element(&mut self) -> Result<Element<'a>, String> {
        let first = self.u32_at(self.pos)?;
        if first >> 16 != 0 {
            // small data element: type and size packed into one word
            let dtype = first & 0xffff;
            let n = (first >> 16) as usize;
            if n > 4 {
                return Err(format!("small element claims {n} bytes"));
            }
            let start = self.pos + 4;
            let data = self.buf.get(start..start + n).ok_or("truncated small element")?;
            self.pos += 8;
            return Ok(Element { dtype, data });
        }
        let n = self.u32_at(self.pos + 4)? as usize;
        let start = self.pos + 8;
        let data = self
            .buf
            .get(start..start + n)
            .ok_or_else(|| format!("element of {n} bytes runs past end of data"))?;
        let padded = if first == MI_COMPRESSED { n } else { (n + 7) & !7 };
        self.pos = start + padded;
        Ok(Element { dtype: first, data })
    }
}

fn numbers(el: &Element, endian: Endian) -> Result<Vec<f64>, String> {
    macro_rules! conv {
        ($t:ty, $w:expr) => {{
            if el.data.len() % $w != 0 {
                return Err("numeric payload length is not a multiple of its width".into());
            }
            el.data
                .chunks_exact($w)
                .map(|c| {
                    let arr: [u8; $w] = c.try_into().unwrap();
                    let v = match endian {
                        Endian::Little => <$t>::from_le_bytes(arr),
                        Endian::Big => <$t>::from_be_bytes(arr),
                    };
                    v as f64
                })
                .collect()
        }};
    }
    Ok(match el.dtype {
        MI_INT8 => el.data.iter().map(|&b| b as i8 as f64).collect(),
        MI_UINT8 | MI_UTF8 => el.data.iter().map(|&b| b as f64).collect(),
        MI_INT16 => conv!(i16, 2),
        MI_UINT16 | MI_UTF16 => conv!(u16, 2),
        MI_INT32 => conv!(i32, 4),
        MI_UINT32 => conv!(u32, 4),
        MI_SINGLE => conv!(f32, 4),
        MI_DOUBLE => conv!(f64, 8),
        MI_INT64 => conv!(i64, 8),
        MI_UINT64 => conv!(u64, 8),
        other => return Err(format!("unsupported numeric data type {other}")),
    })
}

fn parse_matrix(data: &[u8], endian: Endian) -> Result<(String, MatValue), String> {
    if data.is_empty() {
        return Ok((String::new(), MatValue::Empty));
    }
    let mut cur = Cursor { buf: data, pos: 0, endian };
    let flags_el = cur.next_element()?;
    let flags = numbers(&flags_el, endian)?;
    let class = *flags.first().ok_or("missing array flags")? as u32 as u8;
    let complex = (*flags.first().unwrap() as u32) & 0x800 != 0;
    let dims: Vec<usize> = numbers(&cur.next_element()?, endian)?
        .into_iter()
        .map(|d| d as usize)
        .collect();
    let name_el = cur.next_element()?;
    let name = String::from_utf8_lossy(name_el.data).into_owned();
    let count: usize = dims.iter().product();

    let value = match class {
        MX_CELL => {
            let mut items = Vec::with_capacity(count);
            for _ in 0..count {
                let el = cur.next_element()?;
                if el.dtype != MI_MATRIX {
                    return Err(format!("cell element has data type {}", el.dtype));
                }
                items.push(parse_matrix(el.data, endian)?.1);
            }
            MatValue::Cell { dims, items }
        }
        MX_STRUCT | MX_OBJECT => {
            if class == MX_OBJECT {
                cur.next_element()?; // class name
            }
            let len_el = cur.next_element()?;
            let field_len = *numbers(&len_el, endian)?.first().ok_or("missing field name length")? as usize;
            let names_el = cur.next_element()?;
            let fields: Vec<String> = if field_len == 0 {
                Vec::new()
            } else {
                names_el
                    .data
                    .chunks(field_len)
                    .map(|c| {
                        let end = c.iter().position(|&b| b == 0).unwrap_or(c.len());
                        String::from_utf8_lossy(&c[..end]).into_owned()
                    })
                    .collect()
            };
            let mut items = Vec::with_capacity(count);
            for _ in 0..count {
                let mut row = Vec::with_capacity(fields.len());
                for _ in &fields {
                    let el = cur.next_element()?;
                    if el.dtype != MI_MATRIX {
                        return Err(format!("struct field has data type {}", el.dtype));
                    }
                    row.push(parse_matrix(el.data, endian)?.1);
                }
                items.push(row);
            }
            MatValue::Struct { dims, fields, items }
        }
        MX_CHAR => {
            let el = if cur.at_end() { None } else { Some(cur.next_element()?) };
            let chars = match el {
                None => Vec::new(),
                Some(el) if el.dtype == MI_UTF8 => String::from_utf8_lossy(el.data).chars().collect(),
                Some(el) => numbers(&el, endian)?
                    .into_iter()
                    .map(|c| char::from_u32(c as u32).unwrap_or('\u{FFFD}'))
                    .collect(),
            };
            // stored column-major; transpose multi-row char matrices to row order
            let chars = if dims.len() == 2 && dims[0] > 1 && dims[1] > 1 {
                let (rows, cols) = (dims[0], dims[1]);
                let mut out = Vec::with_capacity(chars.len());
                for r in 0..rows {
                    for c in 0..cols {
                        out.push(chars[c * rows + r]);
                    }
                }
                out
            } else {
                chars
            };
            MatValue::Char { dims, chars }
        }
        MX_SPARSE => return Err("sparse arrays are not supported".into()),
        6..=15 => {
            if complex {
                return Err("complex arrays are not supported".into());
            }
            let data = if count == 0 || cur.at_end() {
                Vec::new()
            } else {
                numbers(&cur.next_element()?, endian)?
            };
            if data.len() != count {
                return Err(format!("array {name:?} has {} values for {count} elements", data.len()));
            }
            MatValue::Numeric { dims, data }
        }
        other => return Err(format!("unsupported array class {other}")),
    };
    Ok((name, value))
}

/// Parses a whole MAT file into its top-level named variables.
pub fn read_mat(bytes: &[u8]) -> Result<Vec<(String, MatValue)>, String> {
    if bytes.len() < 128 {
        return Err("file is shorter than the 128-byte MAT header".into());
    }
    let endian = match &bytes[126..128] {
        b"IM" => Endian::Little,
        b"MI" => Endian::Big,
        _ => return Err("not a level-5 MAT file (bad endian indicator)".into()),
    };
    let mut cur = Cursor {
        buf: &bytes[128..],
        pos: 0,
        endian,
    };
    let mut vars = Vec::new();
    while !cur.at_end() {
        // trailing padding after the last element
        if cur.buf.len() - cur.pos < 8 {
            break;
        }
        let el = cur.next_element()?;
        match el.dtype {
            MI_MATRIX => vars.push(parse_matrix(el.data, endian)?),
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                ZlibDecoder::new(el.data)
                    .read_to_end(&mut inflated)
                    .map_err(|e| format!("cannot inflate compressed element: {e}"))?;
                let mut inner = Cursor {
                    buf: &inflated,
                    pos: 0,
                    endian,
                };
                let el = inner.next_element()?;
                if el.dtype == MI_MATRIX {
                    vars.push(parse_matrix(el.data, endian)?);
                }
            }
            _ => {}
        }
    }
    Ok(vars)
}

pub fn find<'a>(vars: &'a [(String, MatValue)], name: &str) -> Option<&'a MatValue> {
    vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
}
