//! SVG serialization for vector documents.
//!
//! Each region is a `<g>` carrying `id`, `data-layer` and (below the top
//! level) `data-parent`, holding one even-odd `<path>` followed by the
//! groups of its children. Top-level regions live in a wrapper group with
//! `id="root"`.
//!
//! Path data written by [`write_svg`] uses only absolute `M`, `C` and `Z`.
//! The parser accepts this grammar (whitespace and commas interchangeable):
//!
//! ```text
//! path    := (moveto drawto*)*
//! moveto  := ('M' | 'm') pair pair*        extra pairs are implicit lineto
//! drawto  := ('L' | 'l') pair+
//!          | ('H' | 'h') number+
//!          | ('V' | 'v') number+
//!          | ('C' | 'c') (pair pair pair)+
//!          | ('Z' | 'z')
//! pair    := number number
//! number  := sign? (digits ('.' digits?)? | '.' digits) exponent?
//! ```
//!
//! Lines become cubics with inner control points at thirds.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::document::{RegionNode, VectorDocument};
use crate::error::{Error, Result};
use crate::geometry::{BezierPath, CubicBezier, Point2};
use crate::raster::Rgb;

pub const FORMAT_VERSION: u32 = 1;

/// Largest canvas side accepted by the parser.
pub const MAX_CANVAS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvgDialect {
    /// Decimal places for coordinates.
    pub precision: usize,
}

impl Default for SvgDialect {
    fn default() -> Self {
        SvgDialect { precision: 3 }
    }
}

/// Format a coordinate with at most `precision` decimals, trailing zeros
/// dropped and negative zero printed as `0`.
pub fn format_number(v: f64, precision: usize) -> Result<String> {
    if !v.is_finite() {
        return Err(Error::Serialize(format!("non-finite coordinate {v}")));
    }
    let mut s = format!("{v:.precision$}");
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0').trim_end_matches('.').len();
        s.truncate(trimmed);
    }
    if s == "-0" {
        s = "0".into();
    }
    Ok(s)
}

fn escape_attr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn path_data(subpaths: &[BezierPath], precision: usize) -> Result<String> {
    let num = |p: Point2| -> Result<String> {
        Ok(format!(
            "{} {}",
            format_number(p.x, precision)?,
            format_number(p.y, precision)?
        ))
    };
    let mut d = String::new();
    for sp in subpaths {
        if !d.is_empty() {
            d.push(' ');
        }
        let first = sp.segment(0);
        write!(d, "M {}", num(first.p0)?).unwrap();
        for seg in sp.segments() {
            write!(d, " C {} {} {}", num(seg.p1)?, num(seg.p2)?, num(seg.p3)?).unwrap();
        }
        d.push_str(" Z");
    }
    Ok(d)
}

fn write_node(
    out: &mut String,
    node: &RegionNode,
    parent: Option<&str>,
    indent: usize,
    dialect: &SvgDialect,
) -> Result<()> {
    let pad = "  ".repeat(indent);
    write!(
        out,
        "{pad}<g id=\"{}\" data-layer=\"{}\"",
        escape_attr(&node.id),
        node.layer
    )
    .unwrap();
    if let Some(p) = parent {
        write!(out, " data-parent=\"{}\"", escape_attr(p)).unwrap();
    }
    if let Some(src) = &node.source_mask_id {
        write!(out, " data-source-mask=\"{}\"", escape_attr(src)).unwrap();
    }
    out.push_str(">\n");
    if !node.fill.is_finite() {
        return Err(Error::Serialize(format!(
            "region '{}' has a non-finite fill",
            node.id
        )));
    }
    writeln!(
        out,
        "{pad}  <path fill=\"{}\" fill-rule=\"evenodd\" d=\"{}\"/>",
        node.fill.to_hex(),
        path_data(&node.subpaths, dialect.precision)?
    )
    .unwrap();
    for c in &node.children {
        write_node(out, c, Some(&node.id), indent + 1, dialect)?;
    }
    writeln!(out, "{pad}</g>").unwrap();
    Ok(())
}

/// Serialize a document.
pub fn write_svg(doc: &VectorDocument, dialect: &SvgDialect) -> Result<String> {
    if dialect.precision == 0 || dialect.precision > 12 {
        return Err(Error::Serialize(format!(
            "precision must be in 1..=12, got {}",
            dialect.precision
        )));
    }
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" data-format-version=\"{FORMAT_VERSION}\">",
        w = doc.width,
        h = doc.height
    )
    .unwrap();
    if doc.roots.is_empty() {
        out.push_str("  <g id=\"root\"/>\n");
    } else {
        out.push_str("  <g id=\"root\">\n");
        for r in &doc.roots {
            write_node(&mut out, r, None, 2, dialect)?;
        }
        out.push_str("  </g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Serialize with the default dialect.
pub fn to_svg(doc: &VectorDocument) -> Result<String> {
    write_svg(doc, &SvgDialect::default())
}

/// Parser result: the document plus non-fatal warnings.
#[derive(Debug, Clone)]
pub struct ParsedSvg {
    pub document: VectorDocument,
    pub warnings: Vec<String>,
}

struct PathLexer<'a> {
    s: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> PathLexer<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.base + self.pos,
            message: msg.into(),
        }
    }

    fn skip_sep(&mut self) {
        while self.pos < self.s.len()
            && (self.s[self.pos].is_ascii_whitespace() || self.s[self.pos] == b',')
        {
            self.pos += 1;
        }
    }

    fn peek_number(&mut self) -> bool {
        self.skip_sep();
        matches!(self.s.get(self.pos), Some(c) if c.is_ascii_digit() || matches!(c, b'-' | b'+' | b'.'))
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_sep();
        let start = self.pos;
        let s = self.s;
        let mut i = self.pos;
        if matches!(s.get(i), Some(b'-' | b'+')) {
            i += 1;
        }
        let int_start = i;
        while matches!(s.get(i), Some(c) if c.is_ascii_digit()) {
            i += 1;
        }
        let mut digits = i - int_start;
        if s.get(i) == Some(&b'.') {
            i += 1;
            let f = i;
            while matches!(s.get(i), Some(c) if c.is_ascii_digit()) {
                i += 1;
            }
            digits += i - f;
        }
        if digits == 0 {
            return Err(self.err("expected a number"));
        }
        if matches!(s.get(i), Some(b'e' | b'E')) {
            let mut j = i + 1;
            if matches!(s.get(j), Some(b'-' | b'+')) {
                j += 1;
            }
            let e = j;
            while matches!(s.get(j), Some(c) if c.is_ascii_digit()) {
                j += 1;
            }
            if j > e {
                i = j;
            }
        }
        let text = std::str::from_utf8(&s[start..i]).map_err(|_| self.err("invalid number"))?;
        let v: f64 = text
            .parse()
            .map_err(|_| self.err(format!("invalid number '{text}'")))?;
        if !v.is_finite() {
            return Err(self.err(format!("number '{text}' out of range")));
        }
        self.pos = i;
        Ok(v)
    }

    fn pair(&mut self) -> Result<Point2> {
        let x = self.number()?;
        let y = self.number()?;
        Ok(Point2::new(x, y))
    }
}

/// Parse path data into closed subpaths. `base` is the byte offset of `d`
/// in the enclosing text, used for error positions.
pub fn parse_path_data(
    d: &str,
    base: usize,
    warnings: &mut Vec<String>,
) -> Result<Vec<BezierPath>> {
    let mut lx = PathLexer {
        s: d.as_bytes(),
        pos: 0,
        base,
    };
    let mut out = Vec::new();
    let mut segs: Vec<CubicBezier> = Vec::new();
    let mut start = Point2::default();
    let mut cur = Point2::default();
    let mut open = false;

    let finish = |segs: &mut Vec<CubicBezier>,
                  start: Point2,
                  cur: Point2,
                  out: &mut Vec<BezierPath>|
     -> Result<()> {
        if cur != start {
            segs.push(CubicBezier::line(cur, start));
        }
        if !segs.is_empty() {
            // Consecutive segments share endpoints exactly, so rebuild the
            // ring of control points directly.
            let mut pts = Vec::with_capacity(segs.len() * 3);
            for s in segs.iter() {
                pts.extend_from_slice(&[s.p0, s.p1, s.p2]);
            }
            out.push(BezierPath::from_control_points(pts)?);
        }
        segs.clear();
        Ok(())
    };

    loop {
        lx.skip_sep();
        let Some(&c) = lx.s.get(lx.pos) else { break };
        let cmd_offset = lx.pos;
        lx.pos += 1;
        let rel = c.is_ascii_lowercase();
        let origin = |cur: Point2| if rel { cur } else { Point2::default() };
        match c.to_ascii_uppercase() {
            b'M' => {
                if open {
                    warnings.push(format!(
                        "unclosed subpath before byte {}; closed automatically",
                        base + cmd_offset
                    ));
                    finish(&mut segs, start, cur, &mut out)?;
                }
                let p = lx.pair()? + origin(cur);
                start = p;
                cur = p;
                open = true;
                while lx.peek_number() {
                    let q = lx.pair()? + origin(cur);
                    segs.push(CubicBezier::line(cur, q));
                    cur = q;
                }
            }
            b'Z' => {
                if open {
                    finish(&mut segs, start, cur, &mut out)?;
                }
                cur = start;
                open = false;
            }
            cmd @ (b'L' | b'H' | b'V' | b'C') => {
                if !open {
                    // Drawing after Z continues from the previous start.
                    open = true;
                }
                loop {
                    let o = origin(cur);
                    match cmd {
                        b'L' => {
                            let q = lx.pair()? + o;
                            segs.push(CubicBezier::line(cur, q));
                            cur = q;
                        }
                        b'H' => {
                            let x = lx.number()? + o.x;
                            let q = Point2::new(x, cur.y);
                            segs.push(CubicBezier::line(cur, q));
                            cur = q;
                        }
                        b'V' => {
                            let y = lx.number()? + o.y;
                            let q = Point2::new(cur.x, y);
                            segs.push(CubicBezier::line(cur, q));
                            cur = q;
                        }
                        _ => {
                            let p1 = lx.pair()? + o;
                            let p2 = lx.pair()? + o;
                            let p3 = lx.pair()? + o;
                            segs.push(CubicBezier::new(cur, p1, p2, p3));
                            cur = p3;
                        }
                    }
                    if !lx.peek_number() {
                        break;
                    }
                }
            }
            _ => {
                lx.pos = cmd_offset;
                return Err(lx.err(format!(
                    "unsupported path command '{}'",
                    char::from(c).escape_default()
                )));
            }
        }
    }
    if open {
        if !segs.is_empty() {
            warnings.push("unclosed subpath at end of path data; closed automatically".into());
        }
        finish(&mut segs, start, cur, &mut out)?;
    }
    Ok(out)
}

fn parse_hex_color(s: &str) -> Option<Rgb> {
    let h = s.strip_prefix('#')?;
    if !h.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    let v = |i: usize, n: usize| u8::from_str_radix(&h[i..i + n], 16).ok();
    let rgb = match h.len() {
        6 => [v(0, 2)?, v(2, 2)?, v(4, 2)?],
        3 => [v(0, 1)? * 17, v(1, 1)? * 17, v(2, 1)? * 17],
        _ => return None,
    };
    Some(Rgb::from_u8(rgb))
}

/// Parse a fill value. Non-hex forms are quantized to 8 bits like hex.
pub fn parse_color(s: &str) -> Option<Rgb> {
    let s = s.trim();
    if let Some(c) = parse_hex_color(s) {
        return Some(c);
    }
    let c = csscolorparser::parse(s).ok()?;
    let [r, g, b, _] = c.to_rgba8();
    Some(Rgb::from_u8([r, g, b]))
}

fn parse_translate(s: &str) -> Option<Point2> {
    let s = s.trim();
    let inner = s
        .strip_prefix("translate")?
        .trim_start()
        .strip_prefix('(')?
        .strip_suffix(')')?;
    let nums: Vec<f64> = inner
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    let p = match nums.as_slice() {
        [x] => Point2::new(*x, 0.0),
        [x, y] => Point2::new(*x, *y),
        _ => return None,
    };
    p.is_finite().then_some(p)
}

fn parse_dimension(s: &str) -> Option<usize> {
    let t = s.trim();
    let t = t.strip_suffix("px").unwrap_or(t);
    let v: f64 = t.trim().parse().ok()?;
    if v.is_finite() && v >= 1.0 && v <= MAX_CANVAS as f64 {
        Some(v.round() as usize)
    } else {
        None
    }
}

const KNOWN_ATTRS: &[&str] = &[
    "id",
    "data-layer",
    "data-parent",
    "data-source-mask",
    "fill",
    "fill-rule",
    "d",
    "transform",
    "width",
    "height",
    "viewBox",
    "version",
    "data-format-version",
];

struct Builder<'t> {
    text: &'t str,
    warnings: Vec<String>,
    ids: HashSet<String>,
    auto: usize,
}

/// A region as seen in the file, before data-parent reconciliation.
struct Raw {
    node: RegionNode,
    declared_parent: Option<String>,
    nested: bool,
}

impl<'t> Builder<'t> {
    fn offset_in_value(&self, attr: &roxmltree::Attribute) -> usize {
        let r = attr.range_value();
        if r.end <= self.text.len() && self.text.get(r.clone()) == Some(attr.value()) {
            r.start
        } else {
            r.start.min(self.text.len())
        }
    }

    fn check_attrs(&mut self, n: roxmltree::Node) {
        for a in n.attributes() {
            if a.namespace().is_some() && a.namespace() != Some("http://www.w3.org/2000/svg") {
                continue;
            }
            if !KNOWN_ATTRS.contains(&a.name()) {
                self.warnings.push(format!(
                    "ignored attribute '{}' on <{}> at byte {}",
                    a.name(),
                    n.tag_name().name(),
                    n.range().start
                ));
            }
        }
    }

    fn transform_of(&mut self, n: roxmltree::Node) -> Point2 {
        match n.attribute("transform") {
            None => Point2::default(),
            Some(t) => parse_translate(t).unwrap_or_else(|| {
                self.warnings.push(format!(
                    "unsupported transform '{t}' at byte {}; ignored",
                    n.range().start
                ));
                Point2::default()
            }),
        }
    }

    fn fresh_id(&mut self, wanted: Option<&str>, at: usize) -> String {
        if let Some(w) = wanted.filter(|w| !w.is_empty() && *w != "root") {
            if self.ids.insert(w.to_string()) {
                return w.to_string();
            }
            let mut k = 1;
            loop {
                let cand = format!("{w}_{k}");
                if self.ids.insert(cand.clone()) {
                    self.warnings.push(format!(
                        "duplicate id '{w}' at byte {at}; renamed to '{cand}'"
                    ));
                    return cand;
                }
                k += 1;
            }
        }
        loop {
            let cand = format!("region_{}", self.auto);
            self.auto += 1;
            if self.ids.insert(cand.clone()) {
                return cand;
            }
        }
    }

    fn fill_of(&mut self, n: roxmltree::Node, inherited: Option<Rgb>) -> Option<Rgb> {
        match n.attribute("fill") {
            None => inherited,
            Some(v) => match parse_color(v) {
                Some(c) => Some(c),
                None => {
                    self.warnings.push(format!(
                        "unsupported fill '{v}' at byte {}; using black",
                        n.range().start
                    ));
                    Some(Rgb::BLACK)
                }
            },
        }
    }

    fn path_subpaths(&mut self, p: roxmltree::Node, offset: Point2) -> Result<Vec<BezierPath>> {
        self.check_attrs(p);
        let Some(attr) = p.attributes().find(|a| a.name() == "d") else {
            self.warnings
                .push(format!("<path> without 'd' at byte {}", p.range().start));
            return Ok(Vec::new());
        };
        let base = self.offset_in_value(&attr);
        let subs = parse_path_data(attr.value(), base, &mut self.warnings)?;
        if p.attribute("fill-rule").is_some_and(|r| r != "evenodd") {
            self.warnings.push(format!(
                "fill-rule at byte {} treated as evenodd",
                p.range().start
            ));
        }
        let t = offset + self.transform_of(p);
        Ok(if t == Point2::default() {
            subs
        } else {
            subs.iter().map(|s| s.translate(t)).collect()
        })
    }

    /// Walk the children of `el`, appending regions to `out`.
    fn children(
        &mut self,
        el: roxmltree::Node,
        offset: Point2,
        fill: Option<Rgb>,
        parent: Option<(&str, usize)>,
        out: &mut Vec<Raw>,
    ) -> Result<()> {
        for c in el.children().filter(|c| c.is_element()) {
            match c.tag_name().name() {
                "g" => self.group(c, offset, fill, parent, out)?,
                "path" => {
                    // A bare path outside any region group is a region of its own.
                    let at = c.range().start;
                    let subs = self.path_subpaths(c, offset)?;
                    if subs.is_empty() {
                        continue;
                    }
                    let f = self.fill_of(c, fill).unwrap_or(Rgb::BLACK);
                    let id = self.fresh_id(c.attribute("id"), at);
                    let layer = parent.map_or(1, |(_, l)| l + 1);
                    out.push(Raw {
                        node: RegionNode::new(id, layer, subs, f.clamped()),
                        declared_parent: None,
                        nested: parent.is_some(),
                    });
                }
                "title" | "desc" | "metadata" => {}
                other => self.warnings.push(format!(
                    "ignored element <{other}> at byte {}",
                    c.range().start
                )),
            }
        }
        Ok(())
    }

    fn group(
        &mut self,
        g: roxmltree::Node,
        offset: Point2,
        fill: Option<Rgb>,
        parent: Option<(&str, usize)>,
        out: &mut Vec<Raw>,
    ) -> Result<()> {
        self.check_attrs(g);
        let at = g.range().start;
        let offset = offset + self.transform_of(g);
        let fill = self.fill_of(g, fill);
        let paths: Vec<_> = g
            .children()
            .filter(|c| c.is_element() && c.tag_name().name() == "path")
            .collect();
        if paths.is_empty() {
            // Plain container: its regions attach to the enclosing region.
            return self.children_except_paths(g, offset, fill, parent, out);
        }
        let mut subpaths = Vec::new();
        let mut region_fill = None;
        for p in &paths {
            let subs = self.path_subpaths(*p, offset)?;
            if !subs.is_empty() && region_fill.is_none() {
                region_fill = self.fill_of(*p, fill);
            }
            subpaths.extend(subs);
        }
        if paths.len() > 1 {
            self.warnings.push(format!(
                "group at byte {at} has {} paths; merged into one region",
                paths.len()
            ));
        }
        let declared_layer = match g.attribute("data-layer") {
            None => None,
            Some(v) => match v.trim().parse::<usize>() {
                Ok(l) if l >= 1 => Some(l),
                _ => {
                    self.warnings
                        .push(format!("invalid data-layer '{v}' at byte {at}"));
                    None
                }
            },
        };
        let layer = match parent {
            Some((_, pl)) => {
                if declared_layer.is_some_and(|l| l != pl + 1) {
                    self.warnings.push(format!(
                        "data-layer at byte {at} disagrees with nesting; using {}",
                        pl + 1
                    ));
                }
                pl + 1
            }
            None => declared_layer.unwrap_or(1),
        };
        let id = self.fresh_id(g.attribute("id"), at);
        let declared_parent = g.attribute("data-parent").map(str::to_string);
        if let (Some((pid, _)), Some(dp)) = (parent, declared_parent.as_deref()) {
            if dp != pid {
                self.warnings.push(format!(
                    "data-parent '{dp}' of '{id}' disagrees with nesting under '{pid}'; nesting wins"
                ));
            }
        }
        if subpaths.is_empty() {
            self.warnings
                .push(format!("group '{id}' has no drawable path; dropped"));
            self.ids.remove(&id);
            return self.children_except_paths(g, offset, fill, parent, out);
        }
        let mut node = RegionNode::new(
            id.clone(),
            layer,
            subpaths,
            region_fill.unwrap_or(Rgb::BLACK).clamped(),
        );
        node.source_mask_id = g.attribute("data-source-mask").map(str::to_string);
        let mut kids = Vec::new();
        self.children_except_paths(g, offset, fill, Some((&id, layer)), &mut kids)?;
        // Nested regions become children now; top-level ones stay loose so
        // data-parent can reattach them later.
        node.children = kids.into_iter().map(|r| r.node).collect();
        out.push(Raw {
            node,
            declared_parent,
            nested: parent.is_some(),
        });
        Ok(())
    }

    fn children_except_paths(
        &mut self,
        g: roxmltree::Node,
        offset: Point2,
        fill: Option<Rgb>,
        parent: Option<(&str, usize)>,
        out: &mut Vec<Raw>,
    ) -> Result<()> {
        for c in g.children().filter(|c| c.is_element()) {
            match c.tag_name().name() {
                "g" => self.group(c, offset, fill, parent, out)?,
                "path" => {}
                "title" | "desc" | "metadata" => {}
                other => self.warnings.push(format!(
                    "ignored element <{other}> at byte {}",
                    c.range().start
                )),
            }
        }
        Ok(())
    }
}

fn byte_offset(text: &str, pos: roxmltree::TextPos) -> usize {
    let mut off = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == pos.row as usize {
            let col = (pos.col as usize).saturating_sub(1);
            return off + line.char_indices().nth(col).map_or(line.len(), |(b, _)| b);
        }
        off += line.len();
    }
    text.len()
}

/// Reattach flattened top-level regions using their `data-parent`.
fn reattach(raws: Vec<Raw>, warnings: &mut Vec<String>) -> Vec<RegionNode> {
    let top_ids: HashSet<String> = raws.iter().map(|r| r.node.id.clone()).collect();
    let mut wants: HashMap<String, String> = HashMap::new();
    for r in &raws {
        if r.nested {
            continue;
        }
        if let Some(p) = &r.declared_parent {
            if top_ids.contains(p) && p != &r.node.id {
                wants.insert(r.node.id.clone(), p.clone());
            } else if !p.is_empty() {
                warnings.push(format!(
                    "data-parent '{p}' of '{}' does not name a top-level region; kept at top level",
                    r.node.id
                ));
            }
        }
    }
    // Drop links that would form cycles.
    let ids: Vec<String> = wants.keys().cloned().collect();
    let mut sorted = ids;
    sorted.sort();
    for id in sorted {
        let mut seen = HashSet::new();
        let mut cur = id.clone();
        seen.insert(cur.clone());
        while let Some(p) = wants.get(&cur) {
            if !seen.insert(p.clone()) {
                warnings.push(format!("data-parent cycle through '{id}'; link ignored"));
                wants.remove(&id);
                break;
            }
            cur = p.clone();
        }
    }
    if wants.is_empty() {
        return raws.into_iter().map(|r| r.node).collect();
    }
    let mut nodes: Vec<Option<RegionNode>> = raws.into_iter().map(|r| Some(r.node)).collect();
    let index: HashMap<String, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_ref().unwrap().id.clone(), i))
        .collect();
    // Attach deepest first so each moved node carries its own children.
    let depth = |id: &String| {
        let mut d = 0;
        let mut c = id;
        while let Some(p) = wants.get(c) {
            d += 1;
            c = p;
        }
        d
    };
    let mut order: Vec<(usize, usize)> = wants.keys().map(|k| (depth(k), index[k])).collect();
    order.sort_by(|a, b| b.cmp(a));
    for (_, i) in order {
        let mut child = nodes[i].take().expect("attached once");
        let pi = index[&wants[&child.id]];
        let parent = nodes[pi].as_mut().expect("parent still top level");
        child.set_layer_deep(parent.layer + 1);
        parent.children.push(child);
    }
    nodes.into_iter().flatten().collect()
}

/// Parse an SVG document. Never panics; malformed input yields
/// [`Error::Parse`] with a byte offset.
pub fn parse_svg(text: &str) -> Result<ParsedSvg> {
    let opts = roxmltree::ParsingOptions {
        allow_dtd: false,
        ..Default::default()
    };
    let xml = roxmltree::Document::parse_with_options(text, opts).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.pos()),
        message: e.to_string(),
    })?;
    let root = xml.root_element();
    if root.tag_name().name() != "svg" {
        return Err(Error::Parse {
            offset: root.range().start,
            message: format!(
                "root element is <{}>, expected <svg>",
                root.tag_name().name()
            ),
        });
    }
    let mut b = Builder {
        text,
        warnings: Vec::new(),
        ids: HashSet::new(),
        auto: 0,
    };
    b.check_attrs(root);
    if let Some(v) = root.attribute("data-format-version") {
        if v.trim() != FORMAT_VERSION.to_string() {
            b.warnings.push(format!(
                "format version '{v}' differs from {FORMAT_VERSION}"
            ));
        }
    }
    let view = root.attribute("viewBox").and_then(|v| {
        let n: Vec<f64> = v
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .filter_map(|t| t.parse().ok())
            .collect();
        (n.len() == 4).then(|| (n[2], n[3]))
    });
    let dim = |attr: &str, fallback: Option<f64>| -> Result<usize> {
        let from_view = fallback.and_then(|v| parse_dimension(&v.to_string()));
        match root.attribute(attr) {
            Some(v) => parse_dimension(v).ok_or_else(|| Error::Parse {
                offset: root.range().start,
                message: format!("invalid {attr} '{v}'"),
            }),
            None => from_view.ok_or_else(|| Error::Parse {
                offset: root.range().start,
                message: format!("missing {attr}"),
            }),
        }
    };
    let width = dim("width", view.map(|v| v.0))?;
    let height = dim("height", view.map(|v| v.1))?;
    let mut raws = Vec::new();
    let offset = b.transform_of(root);
    b.children(root, offset, None, None, &mut raws)?;
    let mut warnings = std::mem::take(&mut b.warnings);
    let roots = reattach(raws, &mut warnings);
    let finite = roots.iter().all(|r| {
        let mut ok = true;
        r.visit(&mut |n| ok &= n.points().all(Point2::is_finite));
        ok
    });
    if !finite {
        return Err(Error::Parse {
            offset: 0,
            message: "coordinates overflow after applying transforms".into(),
        });
    }
    Ok(ParsedSvg {
        document: VectorDocument::with_roots(width, height, roots),
        warnings,
    })
}

/// How one region differs between two documents.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionChange {
    Unchanged,
    /// Same shape, rigidly shifted by `offset` (mean control-point shift).
    Moved {
        offset: Point2,
    },
    Recolored {
        from: Rgb,
        to: Rgb,
    },
    Reshaped,
    Added,
    Removed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionDiff {
    pub id: String,
    /// Never empty; `[Unchanged]` when nothing differs. Geometry and color
    /// changes can occur together.
    pub changes: Vec<RegionChange>,
    /// The region's parent or layer differs between the documents.
    pub restructured: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffOptions {
    /// Max per-point deviation counted as the same geometry.
    pub geometry_tol: f64,
    /// Max per-channel fill difference counted as the same color.
    pub color_tol: f64,
}

impl Default for DiffOptions {
    fn default() -> Self {
        DiffOptions {
            geometry_tol: 1e-3,
            color_tol: 0.5 / 255.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DocumentDiff {
    /// Regions of `a` in preorder, then regions only in `b`.
    pub regions: Vec<RegionDiff>,
}

impl DocumentDiff {
    pub fn is_unchanged(&self) -> bool {
        self.regions
            .iter()
            .all(|r| !r.restructured && r.changes == [RegionChange::Unchanged])
    }

    pub fn count(&self, pred: impl Fn(&RegionChange) -> bool) -> usize {
        self.regions
            .iter()
            .filter(|r| r.changes.iter().any(&pred))
            .count()
    }
}

/// Geometric relation between two regions' outlines.
fn compare_geometry(a: &RegionNode, b: &RegionNode, tol: f64) -> Option<RegionChange> {
    let same_shape = a.subpaths.len() == b.subpaths.len()
        && a.subpaths
            .iter()
            .zip(&b.subpaths)
            .all(|(x, y)| x.segment_count() == y.segment_count());
    if !same_shape {
        return Some(RegionChange::Reshaped);
    }
    let pairs: Vec<(Point2, Point2)> = a.points().copied().zip(b.points().copied()).collect();
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let mut off = Point2::default();
    for (p, q) in &pairs {
        off += *q - *p;
    }
    let off = off * (1.0 / n);
    let residual = pairs
        .iter()
        .map(|(p, q)| (*q - *p - off).norm())
        .fold(0.0, f64::max);
    if residual > tol {
        Some(RegionChange::Reshaped)
    } else if off.norm() > tol {
        Some(RegionChange::Moved { offset: off })
    } else {
        None
    }
}

/// Classify every region by id.
pub fn diff_documents(a: &VectorDocument, b: &VectorDocument) -> DocumentDiff {
    diff_documents_with(a, b, &DiffOptions::default())
}

pub fn diff_documents_with(
    a: &VectorDocument,
    b: &VectorDocument,
    opts: &DiffOptions,
) -> DocumentDiff {
    let bmap: HashMap<&str, (&RegionNode, Option<&str>)> = b
        .preorder_with_parents()
        .into_iter()
        .map(|(n, p)| (n.id.as_str(), (n, p)))
        .collect();
    let mut seen = HashSet::new();
    let mut regions = Vec::new();
    for (na, pa) in a.preorder_with_parents() {
        seen.insert(na.id.as_str());
        let Some(&(nb, pb)) = bmap.get(na.id.as_str()) else {
            regions.push(RegionDiff {
                id: na.id.clone(),
                changes: vec![RegionChange::Removed],
                restructured: false,
            });
            continue;
        };
        let mut changes = Vec::new();
        if let Some(g) = compare_geometry(na, nb, opts.geometry_tol) {
            changes.push(g);
        }
        let dc = na
            .fill
            .0
            .iter()
            .zip(&nb.fill.0)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if dc > opts.color_tol {
            changes.push(RegionChange::Recolored {
                from: na.fill,
                to: nb.fill,
            });
        }
        if changes.is_empty() {
            changes.push(RegionChange::Unchanged);
        }
        regions.push(RegionDiff {
            id: na.id.clone(),
            changes,
            restructured: pa != pb || na.layer != nb.layer,
        });
    }
    for nb in b.preorder() {
        if !seen.contains(nb.id.as_str()) {
            regions.push(RegionDiff {
                id: nb.id.clone(),
                changes: vec![RegionChange::Added],
                restructured: false,
            });
        }
    }
    DocumentDiff { regions }
}
