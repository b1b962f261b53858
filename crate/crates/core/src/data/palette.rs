use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Class id → RGB colour.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Palette {
    pub colors: BTreeMap<i64, [u8; 3]>,
}

const BASE: [[u8; 3]; 16] = [
    [0, 128, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
];

impl Palette {
    /// Parse `class_id,R,G,B` lines; `#` comments and blank lines skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Config(format!("palette line {}: expected class_id,R,G,B, got {line:?}", n + 1));
            let [id, r, g, b] = parts[..] else { return Err(bad()) };
            let id: i64 = id.parse().map_err(|_| bad())?;
            let rgb = [
                r.parse().map_err(|_| bad())?,
                g.parse().map_err(|_| bad())?,
                b.parse().map_err(|_| bad())?,
            ];
            if colors.insert(id, rgb).is_some() {
                return Err(Error::Config(format!(
                    "palette line {}: class {id} listed twice",
                    n + 1
                )));
            }
        }
        Ok(Palette { colors })
    }

    pub fn to_text(&self) -> String {
        self.colors
            .iter()
            .map(|(id, [r, g, b])| format!("{id},{r},{g},{b}\n"))
            .collect()
    }

    /// Distinct colours for `0..classes`, none of them black.
    pub fn generate(classes: usize) -> Self {
        let colors = (0..classes)
            .map(|i| {
                let c = if i < BASE.len() {
                    BASE[i]
                } else {
                    // spread the remainder over a coarse RGB lattice, skipping black
                    let j = i - BASE.len() + 1;
                    [
                        (j % 7 * 36 + 20) as u8,
                        (j / 7 % 7 * 36 + 20) as u8,
                        (j / 49 % 7 * 36 + 20) as u8,
                    ]
                };
                (i as i64, c)
            })
            .collect();
        Palette { colors }
    }

    pub fn get(&self, id: i64) -> Option<[u8; 3]> {
        self.colors.get(&id).copied()
    }
}
