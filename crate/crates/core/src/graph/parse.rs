use super::{AttrValue, Attrs, DataDecl, GraphNode, ModelGraph, OpKind, ParamDecl, ParseError, SlotRef};
use crate::detops::Shape;

// Model text format, line oriented:
//
//   # comment
//   param <name> <shape> seed=<u64>
//   data <name> <shape>
//   node <id> <op> inputs=<ref>[,<ref>...] [attrs=<k>=<v>[,...]]
//   loss <id>
//
// <shape> is extents joined by `x` (e.g. 8x16). <ref> is `id` or `id:slot`.
// Attr values parse as i64 when they match ^-?[0-9]+$, otherwise as f32;
// canonical float text always carries a `.` or exponent so the two never
// collide on re-print.

fn err(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError { line, msg: msg.into() }
}

fn check_ident(line: usize, s: &str) -> Result<(), ParseError> {
    if s.is_empty() {
        return Err(err(line, "empty identifier"));
    }
    if !s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(err(line, format!("invalid identifier `{s}` (allowed: [A-Za-z0-9_-])")));
    }
    Ok(())
}

fn parse_shape(line: usize, s: &str) -> Result<Shape, ParseError> {
    let mut dims = Vec::new();
    for part in s.split('x') {
        let d: usize = part
            .parse()
            .map_err(|_| err(line, format!("bad shape `{s}`")))?;
        dims.push(d);
    }
    Shape::new(dims).map_err(|e| err(line, e.to_string()))
}

fn parse_ref(line: usize, s: &str) -> Result<SlotRef, ParseError> {
    match s.split_once(':') {
        None => Ok(SlotRef::new(s, 0)),
        Some((id, slot)) => {
            let slot: u32 = slot.parse().map_err(|_| err(line, format!("bad slot in `{s}`")))?;
            Ok(SlotRef::new(id, slot))
        }
    }
}

fn parse_attr_value(line: usize, s: &str) -> Result<AttrValue, ParseError> {
    let is_int = {
        let t = s.strip_prefix('-').unwrap_or(s);
        !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit())
    };
    if is_int {
        return s
            .parse::<i64>()
            .map(AttrValue::Int)
            .map_err(|_| err(line, format!("integer out of range: `{s}`")));
    }
    let v: f32 = s.parse().map_err(|_| err(line, format!("bad attr value `{s}`")))?;
    if !v.is_finite() {
        return Err(err(line, format!("non-finite attr value `{s}`")));
    }
    Ok(AttrValue::Float(v))
}

pub fn parse_model(text: &str) -> Result<ModelGraph, ParseError> {
    let mut params = Vec::new();
    let mut data = Vec::new();
    let mut nodes = Vec::new();
    let mut loss: Option<String> = None;

    for (i, raw) in text.lines().enumerate() {
        let lno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "param" => {
                if fields.len() != 4 {
                    return Err(err(lno, "expected: param <name> <shape> seed=<u64>"));
                }
                check_ident(lno, fields[1])?;
                let shape = parse_shape(lno, fields[2])?;
                let seed = fields[3]
                    .strip_prefix("seed=")
                    .and_then(|s| s.parse::<u64>().ok())
                    .ok_or_else(|| err(lno, "expected seed=<u64>"))?;
                params.push(ParamDecl { name: fields[1].to_string(), shape, seed });
            }
            "data" => {
                if fields.len() != 3 {
                    return Err(err(lno, "expected: data <name> <shape>"));
                }
                check_ident(lno, fields[1])?;
                data.push(DataDecl { name: fields[1].to_string(), shape: parse_shape(lno, fields[2])? });
            }
            "node" => {
                if fields.len() < 4 {
                    return Err(err(lno, "expected: node <id> <op> inputs=... [attrs=...]"));
                }
                check_ident(lno, fields[1])?;
                let kind = OpKind::from_text_name(fields[2])
                    .ok_or_else(|| err(lno, format!("unknown op `{}`", fields[2])))?;
                let mut inputs = Vec::new();
                let mut attrs = Attrs::new();
                let mut saw_inputs = false;
                for f in &fields[3..] {
                    if let Some(list) = f.strip_prefix("inputs=") {
                        saw_inputs = true;
                        for r in list.split(',').filter(|r| !r.is_empty()) {
                            inputs.push(parse_ref(lno, r)?);
                        }
                    } else if let Some(list) = f.strip_prefix("attrs=") {
                        for kv in list.split(',').filter(|r| !r.is_empty()) {
                            let (k, v) = kv
                                .split_once('=')
                                .ok_or_else(|| err(lno, format!("bad attr `{kv}`")))?;
                            check_ident(lno, k)?;
                            if attrs.insert(k.to_string(), parse_attr_value(lno, v)?).is_some() {
                                return Err(err(lno, format!("duplicate attr `{k}`")));
                            }
                        }
                    } else {
                        return Err(err(lno, format!("unexpected field `{f}`")));
                    }
                }
                if !saw_inputs {
                    return Err(err(lno, "node requires inputs=..."));
                }
                nodes.push(GraphNode { id: fields[1].to_string(), kind, inputs, attrs });
            }
            "loss" => {
                if fields.len() != 2 {
                    return Err(err(lno, "expected: loss <id>"));
                }
                if loss.replace(fields[1].to_string()).is_some() {
                    return Err(err(lno, "multiple loss declarations"));
                }
            }
            other => return Err(err(lno, format!("unknown directive `{other}`"))),
        }
    }

    let loss = loss.ok_or_else(|| err(text.lines().count().max(1), "missing loss declaration"))?;
    Ok(ModelGraph { params, data, nodes, loss })
}
