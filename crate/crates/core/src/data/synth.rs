//! Rendered synthetic expressions over a tiny glyph set.
//!
//! Expressions come from a stochastic grammar of numbers joined by `+ - =`,
//! optionally with decimal points, fractions and superscripts. Labels are LaTeX
//! token strings; images are laid out as nested boxes with 5x7 bitmap glyphs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{preprocess, save_raster, DEFAULT_SIZE_CAP};
use super::vocab::Vocabulary;
use super::{manifest_text, ManifestEntry, Sample, MANIFEST_FILE, VOCAB_FILE};
use crate::error::{Error, Result};

/// Built-in symbol set, in vocabulary order.
pub const SYMBOLS: [&str; 18] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "=", ".", "\\frac", "^", "{", "}",
];
pub const CLOSE: &str = "}";

/// Height in pixels of a full-size glyph.
pub const GLYPH_HEIGHT: usize = 16;
const MARGIN: usize = 4;
const MAX_FRACTION_DEPTH: usize = 2;

pub fn builtin_vocabulary() -> Vocabulary {
    Vocabulary::new(SYMBOLS).expect("built-in symbols are distinct")
}

/// Corpus difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tier {
    /// Integers joined by `+ - =`.
    Basic,
    /// Adds decimal numbers whose point is a quarter of the glyph height.
    Decimal,
    /// Adds fractions (nested up to two levels) and superscripts.
    Structured,
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Tier::Basic),
            "decimal" => Ok(Tier::Decimal),
            "structured" => Ok(Tier::Structured),
            _ => Err(Error::Config(format!(
                "unknown tier `{s}` (expected basic, decimal or structured)"
            ))),
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Basic => "basic",
            Tier::Decimal => "decimal",
            Tier::Structured => "structured",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Plus,
    Minus,
    Equals,
}

impl Operator {
    fn token(self) -> &'static str {
        match self {
            Operator::Plus => "+",
            Operator::Minus => "-",
            Operator::Equals => "=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Digit(u8),
    Dot,
    Op(Operator),
    Frac(Expr, Expr),
    /// Superscript attached to the preceding item.
    Sup(Expr),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Expr(pub Vec<Item>);

impl Expr {
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.push_tokens(&mut out);
        out
    }

    fn push_tokens(&self, out: &mut Vec<String>) {
        let group = |e: &Expr, out: &mut Vec<String>| {
            out.push("{".into());
            e.push_tokens(out);
            out.push(CLOSE.into());
        };
        for item in &self.0 {
            match item {
                Item::Digit(d) => out.push(d.to_string()),
                Item::Dot => out.push(".".into()),
                Item::Op(op) => out.push(op.token().into()),
                Item::Frac(num, den) => {
                    out.push("\\frac".into());
                    group(num, out);
                    group(den, out);
                }
                Item::Sup(exp) => {
                    out.push("^".into());
                    group(exp, out);
                }
            }
        }
    }

    /// Parses a token string produced by the grammar.
    pub fn parse<S: AsRef<str>>(tokens: &[S]) -> Result<Expr> {
        let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
        let mut parser = Parser { toks: &toks, pos: 0 };
        let expr = parser.sequence(false)?;
        match parser.peek() {
            None => Ok(expr),
            Some(t) => Err(parser.error(format!("unexpected `{t}`"))),
        }
    }
}

struct Parser<'a> {
    toks: &'a [&'a str],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).copied()
    }

    fn error(&self, msg: String) -> Error {
        Error::Input(format!("token {}: {msg}", self.pos))
    }

    fn group(&mut self) -> Result<Expr> {
        if self.peek() != Some("{") {
            return Err(self.error("expected `{`".into()));
        }
        self.pos += 1;
        let inner = self.sequence(true)?;
        if self.peek() != Some(CLOSE) {
            return Err(self.error("expected `}`".into()));
        }
        self.pos += 1;
        if inner.0.is_empty() {
            return Err(self.error("empty group".into()));
        }
        Ok(inner)
    }

    fn sequence(&mut self, nested: bool) -> Result<Expr> {
        let mut items = Vec::new();
        while let Some(t) = self.peek() {
            let item = match t {
                "+" => Item::Op(Operator::Plus),
                "-" => Item::Op(Operator::Minus),
                "=" => Item::Op(Operator::Equals),
                "." => Item::Dot,
                "\\frac" => {
                    self.pos += 1;
                    let num = self.group()?;
                    let den = self.group()?;
                    items.push(Item::Frac(num, den));
                    continue;
                }
                "^" => {
                    if !matches!(items.last(), Some(Item::Digit(_) | Item::Frac(..))) {
                        return Err(self.error("superscript without a base".into()));
                    }
                    self.pos += 1;
                    items.push(Item::Sup(self.group()?));
                    continue;
                }
                CLOSE if nested => break,
                _ => match t.parse::<u8>() {
                    Ok(d) if d < 10 && t.len() == 1 => Item::Digit(d),
                    _ => return Err(self.error(format!("unexpected `{t}`"))),
                },
            };
            items.push(item);
            self.pos += 1;
        }
        Ok(Expr(items))
    }
}

fn number(rng: &mut ChaCha8Rng, tier: Tier, out: &mut Vec<Item>) {
    let digits = rng.random_range(1..=2);
    for _ in 0..digits {
        out.push(Item::Digit(rng.random_range(0..10)));
    }
    if tier != Tier::Basic && rng.random_bool(0.5) {
        out.push(Item::Dot);
        out.push(Item::Digit(rng.random_range(0..10)));
    }
}

fn expression(rng: &mut ChaCha8Rng, tier: Tier, depth: usize) -> Expr {
    let operands = if depth == 0 { rng.random_range(1..=3) } else { rng.random_range(1..=2) };
    let mut items = Vec::new();
    for i in 0..operands {
        if i > 0 {
            let op = [Operator::Plus, Operator::Minus, Operator::Equals][rng.random_range(0..3)];
            items.push(Item::Op(op));
        }
        let structured = tier == Tier::Structured;
        if structured && depth < MAX_FRACTION_DEPTH && rng.random_bool(0.25) {
            let num = expression(rng, tier, depth + 1);
            let den = expression(rng, tier, depth + 1);
            items.push(Item::Frac(num, den));
        } else {
            number(rng, tier, &mut items);
            if structured && rng.random_bool(0.25) && matches!(items.last(), Some(Item::Digit(_))) {
                items.push(Item::Sup(Expr(vec![Item::Digit(rng.random_range(0..10))])));
            }
        }
    }
    Expr(items)
}

/// A monochrome box with a baseline: `ascent` rows above it, `descent` below.
#[derive(Debug, Clone)]
struct Canvas {
    width: usize,
    ascent: usize,
    descent: usize,
    ink: Vec<bool>,
}

impl Canvas {
    fn blank(width: usize, ascent: usize, descent: usize) -> Canvas {
        Canvas {
            width,
            ascent,
            descent,
            ink: vec![false; width * (ascent + descent)],
        }
    }

    fn height(&self) -> usize {
        self.ascent + self.descent
    }

    fn blit(&mut self, src: &Canvas, top: usize, left: usize) {
        for y in 0..src.height() {
            for x in 0..src.width {
                if src.ink[y * src.width + x] {
                    self.ink[(top + y) * self.width + left + x] = true;
                }
            }
        }
    }

    fn fill(&mut self, top: usize, left: usize, h: usize, w: usize) {
        for y in top..top + h {
            for x in left..left + w {
                self.ink[y * self.width + x] = true;
            }
        }
    }
}

const BITMAPS: [[&str; 7]; 13] = [
    [" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "],
    ["  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"],
    ["#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "],
    ["   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "],
    ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "],
    ["  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "],
    ["#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "],
    [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "],
    [" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "],
    ["     ", "  #  ", "  #  ", "#####", "  #  ", "  #  ", "     "],
    ["     ", "     ", "     ", "#####", "     ", "     ", "     "],
    ["     ", "     ", "#####", "     ", "#####", "     ", "     "],
];

fn glyph(index: usize, size: usize) -> Canvas {
    let bitmap = &BITMAPS[index];
    let width = ((5 * size) as f64 / 7.0).round().max(1.0) as usize;
    let mut c = Canvas::blank(width, size, 0);
    for y in 0..size {
        for x in 0..width {
            let row = bitmap[y * 7 / size].as_bytes();
            c.ink[y * width + x] = row[x * 5 / width] == b'#';
        }
    }
    c
}

struct Layout<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Layout<'_> {
    fn expr(&mut self, e: &Expr, size: usize) -> Canvas {
        let mut parts: Vec<(Canvas, isize)> = Vec::with_capacity(e.0.len());
        for item in &e.0 {
            let part = match item {
                Item::Digit(d) => (glyph(usize::from(*d), size), 0),
                Item::Op(op) => (glyph(10 + *op as usize, size), 0),
                Item::Dot => {
                    let d = (size as f64 / 4.0).round().max(2.0) as usize;
                    let mut c = Canvas::blank(d, d, 0);
                    c.fill(0, 0, d, d);
                    (c, 0)
                }
                Item::Frac(num, den) => (self.fraction(num, den, size), 0),
                Item::Sup(exp) => {
                    let small = (size as f64 * 0.6).round().max(6.0) as usize;
                    (self.expr(exp, small), (size as f64 * 0.45).round() as isize)
                }
            };
            parts.push(part);
        }
        self.hconcat(parts)
    }

    fn fraction(&mut self, num: &Expr, den: &Expr, size: usize) -> Canvas {
        let inner = ((size as f64) * 0.8).round().max(8.0) as usize;
        let (n, d) = (self.expr(num, inner), self.expr(den, inner));
        let bar = (size / 10).max(1);
        let gap = 2;
        let width = n.width.max(d.width) + 4;
        let total = n.height() + gap + bar + gap + d.height();
        let ascent = n.height() + gap + bar / 2 + size / 2;
        let mut c = Canvas::blank(width, ascent, total.saturating_sub(ascent));
        c.blit(&n, 0, (width - n.width) / 2);
        c.fill(n.height() + gap, 0, bar, width);
        c.blit(&d, n.height() + gap + bar + gap, (width - d.width) / 2);
        c
    }

    /// Places boxes left to right on a shared baseline, each raised by its offset.
    fn hconcat(&mut self, parts: Vec<(Canvas, isize)>) -> Canvas {
        let ascent = parts.iter().map(|(c, r)| c.ascent as isize + r).max().unwrap_or(0).max(0);
        let descent = parts.iter().map(|(c, r)| c.descent as isize - r).max().unwrap_or(0).max(0);
        let gaps: Vec<usize> = (0..parts.len()).map(|i| if i == 0 { 0 } else { self.rng.random_range(2..=4) }).collect();
        let width = parts.iter().map(|(c, _)| c.width).sum::<usize>() + gaps.iter().sum::<usize>();
        let mut out = Canvas::blank(width.max(1), ascent as usize, descent as usize);
        let mut left = 0;
        for ((c, raise), gap) in parts.iter().zip(gaps) {
            left += gap;
            let top = (ascent - raise - c.ascent as isize) as usize;
            out.blit(c, top, left);
            left += c.width;
        }
        out
    }
}

/// Renders an expression as dark ink on white paper.
pub fn render(expr: &Expr, rng: &mut ChaCha8Rng) -> GrayImage {
    let c = Layout { rng }.expr(expr, GLYPH_HEIGHT);
    let (w, h) = (c.width + 2 * MARGIN, c.height() + 2 * MARGIN);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let inside = x >= MARGIN && y >= MARGIN && x < MARGIN + c.width && y < MARGIN + c.height();
        let ink = inside && c.ink[(y - MARGIN) * c.width + x - MARGIN];
        Luma([if ink { 0 } else { 255 }])
    })
}

/// A generated expression with its label and raster.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub name: String,
    pub expr: Expr,
    pub tokens: Vec<String>,
    pub raster: GrayImage,
}

/// Generates `n` expressions; the result is a pure function of `(n, seed, tier)`.
pub fn generate(n: usize, seed: u64, tier: Tier) -> Result<Vec<Rendered>> {
    if n == 0 {
        return Err(Error::Input("corpus size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let expr = expression(&mut rng, tier, 0);
            let raster = render(&expr, &mut rng);
            Rendered {
                name: format!("synth_{i:05}.pgm"),
                tokens: expr.tokens(),
                expr,
                raster,
            }
        })
        .collect())
}

pub fn to_samples(rendered: &[Rendered], vocab: &Vocabulary) -> Result<Vec<Sample>> {
    rendered
        .iter()
        .map(|r| {
            Ok(Sample {
                name: r.name.clone(),
                image: preprocess(&r.raster, Some(DEFAULT_SIZE_CAP))?,
                label: vocab.encode(&r.tokens)?,
            })
        })
        .collect()
}

/// Generates and preprocesses a corpus labelled with [`builtin_vocabulary`].
pub fn synth_corpus(n: usize, seed: u64, tier: Tier) -> Result<Vec<Sample>> {
    to_samples(&generate(n, seed, tier)?, &builtin_vocabulary())
}

/// Writes images, `manifest.tsv` and `vocab.txt` into `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, rendered: &[Rendered]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(rendered.len());
    for r in rendered {
        save_raster(dir.join(&r.name), &r.raster)?;
        entries.push(ManifestEntry {
            file: r.name.clone(),
            tokens: r.tokens.clone(),
        });
    }
    let manifest = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest, manifest_text(&entries)).map_err(|e| Error::io(&manifest, e))?;
    let vocab = dir.join(VOCAB_FILE);
    std::fs::write(&vocab, builtin_vocabulary().to_text()).map_err(|e| Error::io(&vocab, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetDir;

    #[test]
    fn vocabulary_size_counts_sentinels() {
        assert_eq!(builtin_vocabulary().len(), SYMBOLS.len() + 3);
    }

    #[test]
    fn corpus_is_deterministic() {
        for tier in [Tier::Basic, Tier::Decimal, Tier::Structured] {
            let a = generate(20, 9, tier).unwrap();
            let b = generate(20, 9, tier).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.tokens, y.tokens);
                assert_eq!(x.raster, y.raster);
            }
        }
        let c = generate(20, 10, Tier::Decimal).unwrap();
        let a = generate(20, 9, Tier::Decimal).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.tokens != y.tokens));
    }

    #[test]
    fn labels_tokenize_and_parse_back() {
        let vocab = builtin_vocabulary();
        for tier in [Tier::Basic, Tier::Decimal, Tier::Structured] {
            for r in generate(200, 4, tier).unwrap() {
                vocab.encode(&r.tokens).unwrap();
                assert_eq!(Expr::parse(&r.tokens).unwrap(), r.expr);
            }
        }
    }

    #[test]
    fn tiers_control_glyph_inventory() {
        let all = |tier| generate(200, 1, tier).unwrap().into_iter().flat_map(|r| r.tokens).collect::<Vec<_>>();
        let basic = all(Tier::Basic);
        assert!(!basic.iter().any(|t| t == "." || t == "^" || t == "\\frac"));
        assert!(all(Tier::Decimal).iter().any(|t| t == "."));
        let s = all(Tier::Structured);
        assert!(s.iter().any(|t| t == "^") && s.iter().any(|t| t == "\\frac"));
    }

    #[test]
    fn superscripts_are_balanced_triples() {
        for r in generate(300, 2, Tier::Structured).unwrap() {
            let t = &r.tokens;
            for (i, tok) in t.iter().enumerate() {
                if tok == "^" {
                    assert_eq!(t[i + 1], "{");
                    let mut depth = 0i32;
                    let close = t[i + 1..]
                        .iter()
                        .position(|x| {
                            depth += i32::from(x == "{") - i32::from(x == CLOSE);
                            depth == 0
                        })
                        .unwrap();
                    assert!(close >= 2);
                }
            }
            let opens = t.iter().filter(|x| *x == "{").count();
            assert_eq!(opens, t.iter().filter(|x| *x == CLOSE).count());
        }
    }

    #[test]
    fn parser_rejects_malformed_strings() {
        for bad in [
            vec!["^", "{", "2", "}"],
            vec!["1", "}"],
            vec!["\\frac", "{", "1", "}"],
            vec!["{", "1", "}"],
            vec!["1", "^", "{", "}"],
            vec!["x"],
        ] {
            assert!(Expr::parse(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn decimal_point_is_small() {
        let expr = Expr(vec![Item::Digit(8), Item::Dot, Item::Digit(8)]);
        let img = render(&expr, &mut ChaCha8Rng::seed_from_u64(0));
        let ink_rows: Vec<u32> = (0..img.height()).filter(|&y| (0..img.width()).any(|x| img.get_pixel(x, y)[0] == 0)).collect();
        assert_eq!(ink_rows.len(), GLYPH_HEIGHT);
        let dot_cols: Vec<u32> = (0..img.width())
            .filter(|&x| {
                let col: Vec<u32> = (0..img.height()).filter(|&y| img.get_pixel(x, y)[0] == 0).collect();
                !col.is_empty() && col.len() <= GLYPH_HEIGHT / 4
            })
            .collect();
        assert_eq!(dot_cols.len(), GLYPH_HEIGHT / 4);
    }

    #[test]
    fn written_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let rendered = generate(5, 3, Tier::Structured).unwrap();
        write_corpus(dir.path(), &rendered).unwrap();
        let ds = DatasetDir::new(dir.path());
        let vocab = Vocabulary::load(ds.vocab_path()).unwrap();
        assert_eq!(vocab, builtin_vocabulary());
        let loaded = ds.load(&vocab, Some(DEFAULT_SIZE_CAP)).unwrap();
        assert_eq!(loaded, to_samples(&rendered, &vocab).unwrap());
    }
}
