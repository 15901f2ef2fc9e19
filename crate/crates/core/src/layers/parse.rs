//! The hyphen-separated architecture notation:
//!
//! ```text
//! network := layer { "-" layer }
//! layer   := ident [ "(" [ number { "," number } ] ")" ]
//! ident   := kind [ digits ]
//! kind    := "conv" | "fc" | "relu" | "maxpool" | "dropout" | "softmax" | "bmconv" | "bmfc"
//! ```
//!
//! `conv(n, w_x, w_y)` may carry two extra arguments `stride, pad`. A dropout
//! probability written with a decimal comma (`dropout1(0,2)`) is read as `0.2`.

use std::collections::HashSet;
use std::fmt::Write;

use super::{ConvSpec, LayerKind, LayerSpec};
use crate::error::ParseError;

pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let mut layers = Vec::new();
    let mut names = HashSet::new();
    p.skip_ws();
    if p.at_end() {
        return Err(ParseError::new(0, "empty architecture"));
    }
    loop {
        let start = p.pos;
        let layer = p.layer()?;
        if !names.insert(layer.name.clone()) {
            return Err(ParseError::new(
                start,
                format!("duplicate layer name `{}`", layer.name),
            ));
        }
        layers.push(layer);
        p.skip_ws();
        if p.at_end() {
            break;
        }
        let sep = p.pos;
        if !p.eat(b'-') {
            return Err(ParseError::new(p.pos, "expected `-` between layers"));
        }
        p.skip_ws();
        if p.at_end() {
            return Err(ParseError::new(sep, "dangling `-` with no following layer"));
        }
    }
    Ok(layers)
}

pub fn print_layers(layers: &[LayerSpec]) -> String {
    let mut out = String::new();
    for (i, l) in layers.iter().enumerate() {
        if i > 0 {
            out.push_str(" - ");
        }
        let (prefix, base) = if l.kind.is_bm() { ("bm", l.name.as_str()) } else { ("", l.name.as_str()) };
        out.push_str(prefix);
        out.push_str(base);
        match &l.kind {
            LayerKind::Conv(c) | LayerKind::BmConv(c) => {
                write!(out, "({}, {}, {}", c.out_ch, c.kw, c.kh).unwrap();
                if c.stride != 1 || c.pad != 0 {
                    write!(out, ", {}, {}", c.stride, c.pad).unwrap();
                }
                out.push(')');
            }
            LayerKind::Fc { units } | LayerKind::BmFc { units } => {
                write!(out, "({units})").unwrap()
            }
            LayerKind::MaxPool { kh, kw } => write!(out, "({kw}, {kh})").unwrap(),
            LayerKind::Dropout { p } => write!(out, "({p:?})").unwrap(),
            LayerKind::Relu | LayerKind::Softmax => {}
        }
    }
    out
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

const KINDS: [&str; 8] = ["maxpool", "dropout", "softmax", "bmconv", "conv", "bmfc", "relu", "fc"];

impl Parser<'_> {
    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn layer(&mut self) -> Result<LayerSpec, ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let ident = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        if ident.is_empty() {
            return Err(ParseError::new(start, "expected a layer name"));
        }
        let lower = ident.to_ascii_lowercase();
        let kind = KINDS
            .iter()
            .find(|k| {
                lower.starts_with(**k) && lower[k.len()..].bytes().all(|c| c.is_ascii_digit())
            })
            .ok_or_else(|| ParseError::new(start, format!("unknown layer kind `{ident}`")))?;
        let index = &lower[kind.len()..];

        self.skip_ws();
        let open = self.pos;
        let args = if self.eat(b'(') {
            self.args(open)?
        } else {
            Vec::new()
        };

        let arity_err = |want: &str| {
            ParseError::new(
                open,
                format!("`{ident}` takes {want} argument(s), got {}", args.len()),
            )
        };
        let count = |i: usize| -> Result<usize, ParseError> {
            let (text, at) = &args[i];
            match text.parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(ParseError::new(*at, format!("expected a positive integer, got `{text}`"))),
            }
        };
        let non_negative = |i: usize| -> Result<usize, ParseError> {
            let (text, at) = &args[i];
            text.parse::<usize>()
                .map_err(|_| ParseError::new(*at, format!("expected an integer, got `{text}`")))
        };

        let (base, kind) = match *kind {
            "conv" | "bmconv" => {
                if args.len() != 3 && args.len() != 5 {
                    return Err(arity_err("3 or 5"));
                }
                let spec = ConvSpec {
                    out_ch: count(0)?,
                    kw: count(1)?,
                    kh: count(2)?,
                    stride: if args.len() == 5 { count(3)? } else { 1 },
                    pad: if args.len() == 5 { non_negative(4)? } else { 0 },
                };
                if *kind == "conv" {
                    ("conv", LayerKind::Conv(spec))
                } else {
                    ("conv", LayerKind::BmConv(spec))
                }
            }
            "fc" | "bmfc" => {
                if args.len() != 1 {
                    return Err(arity_err("1"));
                }
                let units = count(0)?;
                if *kind == "fc" {
                    ("fc", LayerKind::Fc { units })
                } else {
                    ("fc", LayerKind::BmFc { units })
                }
            }
            "maxpool" => {
                if args.len() != 2 {
                    return Err(arity_err("2"));
                }
                ("maxpool", LayerKind::MaxPool {
                    kw: count(0)?,
                    kh: count(1)?,
                })
            }
            "dropout" => {
                let text = match args.len() {
                    1 => args[0].0.clone(),
                    // decimal comma: "0,2"
                    2 => format!("{}.{}", args[0].0, args[1].0),
                    _ => return Err(arity_err("1")),
                };
                let at = args[0].1;
                let p: f64 = text
                    .parse()
                    .map_err(|_| ParseError::new(at, format!("bad probability `{text}`")))?;
                if !(0.0..1.0).contains(&p) {
                    return Err(ParseError::new(at, format!("dropout probability {p} not in [0, 1)")));
                }
                ("dropout", LayerKind::Dropout { p })
            }
            "relu" | "softmax" => {
                if !args.is_empty() {
                    return Err(arity_err("0"));
                }
                if *kind == "relu" {
                    ("relu", LayerKind::Relu)
                } else {
                    ("softmax", LayerKind::Softmax)
                }
            }
            _ => unreachable!(),
        };
        Ok(LayerSpec {
            name: format!("{base}{index}"),
            kind,
        })
    }

    /// Reads `a, b, ...)` after an opening parenthesis at `open`.
    fn args(&mut self, open: usize) -> Result<Vec<(String, usize)>, ParseError> {
        let mut args = Vec::new();
        self.skip_ws();
        if self.eat(b')') {
            return Ok(args);
        }
        loop {
            self.skip_ws();
            let start = self.pos;
            while self
                .peek()
                .is_some_and(|c| c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || c == b'+')
            {
                self.pos += 1;
            }
            if self.at_end() {
                return Err(ParseError::new(open, "unclosed `(`"));
            }
            if start == self.pos {
                return Err(ParseError::new(start, "expected a number"));
            }
            args.push((
                std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string(),
                start,
            ));
            self.skip_ws();
            if self.at_end() {
                return Err(ParseError::new(open, "unclosed `(`"));
            }
            if self.eat(b')') {
                return Ok(args);
            }
            if !self.eat(b',') {
                return Err(ParseError::new(self.pos, "expected `,` or `)`"));
            }
        }
    }
}
