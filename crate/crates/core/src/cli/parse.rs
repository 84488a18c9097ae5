use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::hierarchy::{EntityId, Role};
use crate::protocol::ErrorCode;
use crate::wire::MsgType;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}: syntax error: {msg}")]
    SyntaxError { line: usize, msg: String },
    #[error("line {line}: unknown directive {word:?}")]
    UnknownDirective { line: usize, word: String },
    #[error("line {line}: {id} is used before its entity line")]
    ForwardReference { line: usize, id: String },
}

impl ScenarioError {
    pub fn line(&self) -> usize {
        match self {
            ScenarioError::SyntaxError { line, .. }
            | ScenarioError::UnknownDirective { line, .. }
            | ScenarioError::ForwardReference { line, .. } => *line,
        }
    }
}

/// What a `expect=fail:<x>` clause accepts.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum FailSpec {
    Any,
    Code(u16),
    Name(String),
}

impl FailSpec {
    /// Whether a failure with this code and name satisfies the spec.
    pub fn accepts(&self, code: Option<u16>, name: Option<&str>) -> bool {
        match self {
            FailSpec::Any => true,
            FailSpec::Code(c) => code == Some(*c),
            FailSpec::Name(n) => {
                name == Some(n.as_str()) || code.and_then(ErrorCode::from_u16).is_some_and(|c| c.name() == n)
            }
        }
    }
}

impl std::fmt::Display for FailSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FailSpec::Any => f.write_str("fail"),
            FailSpec::Code(c) => write!(f, "fail:0x{c:04x}"),
            FailSpec::Name(n) => write!(f, "fail:{n}"),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Expectation {
    Success,
    Failure(FailSpec),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MetricScope {
    /// Counter growth during the most recent establish.
    Last,
    Total,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct WireMatch {
    pub msg_type: MsgType,
    pub from: Option<EntityId>,
    pub to: Option<EntityId>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Attack {
    Drop {
        target: WireMatch,
        count: u32,
    },
    Tamper {
        target: WireMatch,
        bit: usize,
        count: u32,
    },
    /// Replays the most recent matching transcript record.
    Replay {
        target: WireMatch,
        expect_code: u16,
    },
    Inject {
        from: EntityId,
        to: EntityId,
        msg_type: MsgType,
        expect_code: u16,
    },
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Directive {
    Entity { id: EntityId, role: Role, parent: Option<EntityId>, expect: Expectation },
    Associate { node: EntityId, ch: EntityId, expect: Expectation },
    SealInstallation,
    Establish { a: EntityId, b: EntityId, expect_msgs: Option<usize>, expect: Expectation },
    Traffic { a: EntityId, b: EntityId, payload: Vec<u8>, expect: Expectation },
    Revoke { id: EntityId, expect: Expectation },
    Attack(Attack),
    ExpectMetric { entity: EntityId, aead: Option<u64>, kdf: Option<u64>, scope: MetricScope },
    ExpectError { code: u16 },
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Line {
    pub number: usize,
    pub text: String,
    pub directive: Directive,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Scenario {
    pub name: String,
    pub lines: Vec<Line>,
}

struct Args<'a> {
    line: usize,
    positional: Vec<&'a str>,
    options: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn new(line: usize, words: &[&'a str]) -> Result<Self, ScenarioError> {
        let mut positional = Vec::new();
        let mut options = BTreeMap::new();
        for w in words {
            match w.split_once('=') {
                Some((k, v)) => {
                    if options.insert(k, v).is_some() {
                        return Err(syntax(line, format!("option {k} given twice")));
                    }
                }
                None if options.is_empty() => positional.push(*w),
                None => return Err(syntax(line, format!("positional {w:?} after options"))),
            }
        }
        Ok(Self { line, positional, options })
    }

    fn expect_positional(&self, n: usize, usage: &str) -> Result<(), ScenarioError> {
        if self.positional.len() != n {
            return Err(syntax(self.line, format!("usage: {usage}")));
        }
        Ok(())
    }

    fn allow(&self, keys: &[&str]) -> Result<(), ScenarioError> {
        match self.options.keys().find(|k| !keys.contains(k)) {
            Some(k) => Err(syntax(self.line, format!("unknown option {k}"))),
            None => Ok(()),
        }
    }

    fn opt(&self, key: &str) -> Option<&'a str> {
        self.options.get(key).copied()
    }

    fn required(&self, key: &str) -> Result<&'a str, ScenarioError> {
        self.opt(key).ok_or_else(|| syntax(self.line, format!("missing {key}=")))
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ScenarioError> {
        self.opt(key)
            .map(|v| v.parse().map_err(|_| syntax(self.line, format!("{key}={v} is not a number"))))
            .transpose()
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::SyntaxError { line, msg: msg.into() }
}

fn parse_code(line: usize, s: &str) -> Result<u16, ScenarioError> {
    let parsed = match s.strip_prefix("0x") {
        Some(h) => u16::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    };
    parsed.ok_or_else(|| syntax(line, format!("bad error code {s:?}")))
}

fn parse_expect(line: usize, v: Option<&str>) -> Result<Expectation, ScenarioError> {
    let Some(v) = v else { return Ok(Expectation::Success) };
    match v {
        "ok" => Ok(Expectation::Success),
        "fail" => Ok(Expectation::Failure(FailSpec::Any)),
        _ => {
            let spec = v.strip_prefix("fail:").ok_or_else(|| syntax(line, format!("bad expect={v}")))?;
            if spec.starts_with("0x") || spec.chars().all(|c| c.is_ascii_digit()) {
                Ok(Expectation::Failure(FailSpec::Code(parse_code(line, spec)?)))
            } else if !spec.is_empty() && spec.chars().all(|c| c.is_ascii_alphanumeric()) {
                Ok(Expectation::Failure(FailSpec::Name(spec.to_owned())))
            } else {
                Err(syntax(line, format!("bad failure name {spec:?}")))
            }
        }
    }
}

fn parse_role(line: usize, s: &str) -> Result<Role, ScenarioError> {
    Ok(match s {
        "node" => Role::Node,
        "ch" => Role::ClusterHead,
        "head" => Role::Head,
        "dm" => Role::DistrictMediator,
        _ => return Err(syntax(line, format!("unknown role {s:?}"))),
    })
}

fn parse_type(line: usize, s: &str) -> Result<MsgType, ScenarioError> {
    MsgType::from_name(s).ok_or_else(|| syntax(line, format!("unknown message type {s:?}")))
}

struct Declared(HashSet<String>);

impl Declared {
    fn id(&self, line: usize, s: &str) -> Result<EntityId, ScenarioError> {
        let id = EntityId::new(s).map_err(|_| syntax(line, format!("invalid entity id {s:?}")))?;
        if !self.0.contains(s) {
            return Err(ScenarioError::ForwardReference { line, id: s.to_owned() });
        }
        Ok(id)
    }

    fn opt_id(&self, line: usize, s: Option<&str>) -> Result<Option<EntityId>, ScenarioError> {
        s.map(|s| self.id(line, s)).transpose()
    }
}

fn wire_match(a: &Args<'_>, declared: &Declared) -> Result<WireMatch, ScenarioError> {
    Ok(WireMatch {
        msg_type: parse_type(a.line, a.required("type")?)?,
        from: declared.opt_id(a.line, a.opt("from"))?,
        to: declared.opt_id(a.line, a.opt("to"))?,
    })
}

fn parse_attack(a: &Args<'_>, declared: &Declared) -> Result<Attack, ScenarioError> {
    let line = a.line;
    let kind = a.positional.first().copied().unwrap_or_default();
    a.expect_positional(1, "attack <drop|replay|tamper|inject> key=value...")?;
    Ok(match kind {
        "drop" => {
            a.allow(&["type", "from", "to", "count"])?;
            Attack::Drop { target: wire_match(a, declared)?, count: a.number("count")?.unwrap_or(1) }
        }
        "tamper" => {
            a.allow(&["type", "from", "to", "count", "bit"])?;
            Attack::Tamper {
                target: wire_match(a, declared)?,
                bit: a.number("bit")?.unwrap_or(8 * 64),
                count: a.number("count")?.unwrap_or(1),
            }
        }
        "replay" => {
            a.allow(&["type", "from", "to", "expect"])?;
            Attack::Replay { target: wire_match(a, declared)?, expect_code: parse_code(line, a.required("expect")?)? }
        }
        "inject" => {
            a.allow(&["type", "from", "to", "expect"])?;
            let from = a.required("from")?;
            let msg_type = parse_type(line, a.required("type")?)?;
            if !matches!(msg_type, MsgType::Relay | MsgType::Hello | MsgType::E2eConfirm) {
                return Err(syntax(line, "inject supports type=relay|hello|confirm"));
            }
            Attack::Inject {
                from: EntityId::new(from).map_err(|_| syntax(line, format!("invalid entity id {from:?}")))?,
                to: declared.id(line, a.required("to")?)?,
                msg_type,
                expect_code: parse_code(line, a.required("expect")?)?,
            }
        }
        other => return Err(syntax(line, format!("unknown attack {other:?}"))),
    })
}

fn parse_line(number: usize, words: &[&str], declared: &mut Declared) -> Result<Directive, ScenarioError> {
    let (word, rest) = words.split_first().expect("blank lines are skipped");
    let a = Args::new(number, rest)?;
    let d = match *word {
        "entity" => {
            a.expect_positional(1, "entity <id> role=<node|ch|head|dm> [parent=<id>]")?;
            a.allow(&["role", "parent", "expect"])?;
            let name = a.positional[0];
            let id = EntityId::new(name).map_err(|_| syntax(number, format!("invalid entity id {name:?}")))?;
            let parent = declared.opt_id(number, a.opt("parent"))?;
            let role = parse_role(number, a.required("role")?)?;
            declared.0.insert(name.to_owned());
            Directive::Entity { id, role, parent, expect: parse_expect(number, a.opt("expect"))? }
        }
        "associate" => {
            a.expect_positional(2, "associate <node> <ch>")?;
            a.allow(&["expect"])?;
            Directive::Associate {
                node: declared.id(number, a.positional[0])?,
                ch: declared.id(number, a.positional[1])?,
                expect: parse_expect(number, a.opt("expect"))?,
            }
        }
        "seal-installation" => {
            a.expect_positional(0, "seal-installation")?;
            a.allow(&[])?;
            Directive::SealInstallation
        }
        "establish" => {
            a.expect_positional(2, "establish <a> <b> [expect_msgs=K] [expect=fail:<code>]")?;
            a.allow(&["expect_msgs", "expect"])?;
            Directive::Establish {
                a: declared.id(number, a.positional[0])?,
                b: declared.id(number, a.positional[1])?,
                expect_msgs: a.number("expect_msgs")?,
                expect: parse_expect(number, a.opt("expect"))?,
            }
        }
        "traffic" => {
            a.expect_positional(3, "traffic <a> <b> <hex payload>")?;
            a.allow(&["expect"])?;
            let payload = hex::decode(a.positional[2]).map_err(|_| syntax(number, "payload is not hex"))?;
            if payload.is_empty() {
                return Err(syntax(number, "empty payload"));
            }
            Directive::Traffic {
                a: declared.id(number, a.positional[0])?,
                b: declared.id(number, a.positional[1])?,
                payload,
                expect: parse_expect(number, a.opt("expect"))?,
            }
        }
        "revoke" => {
            a.expect_positional(1, "revoke <id>")?;
            a.allow(&["expect"])?;
            Directive::Revoke {
                id: declared.id(number, a.positional[0])?,
                expect: parse_expect(number, a.opt("expect"))?,
            }
        }
        "attack" => Directive::Attack(parse_attack(&a, declared)?),
        "expect" => match a.positional.first().copied() {
            Some("metric") => {
                a.expect_positional(2, "expect metric <entity> aead=<n> [kdf=<n>] [scope=last|total]")?;
                a.allow(&["aead", "kdf", "scope"])?;
                let scope = match a.opt("scope").unwrap_or("last") {
                    "last" => MetricScope::Last,
                    "total" => MetricScope::Total,
                    s => return Err(syntax(number, format!("unknown scope {s:?}"))),
                };
                let (aead, kdf) = (a.number("aead")?, a.number("kdf")?);
                if aead.is_none() && kdf.is_none() {
                    return Err(syntax(number, "expect metric needs aead= or kdf="));
                }
                Directive::ExpectMetric { entity: declared.id(number, a.positional[1])?, aead, kdf, scope }
            }
            Some("error") => {
                a.expect_positional(2, "expect error <code>")?;
                a.allow(&[])?;
                Directive::ExpectError { code: parse_code(number, a.positional[1])? }
            }
            _ => return Err(syntax(number, "usage: expect metric ... | expect error <code>")),
        },
        other => return Err(ScenarioError::UnknownDirective { line: number, word: other.to_owned() }),
    };
    Ok(d)
}

/// Parses the line-oriented scenario grammar. `#` starts a comment.
pub fn parse_scenario(name: &str, text: &str) -> Result<Scenario, ScenarioError> {
    let mut declared = Declared(HashSet::new());
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let number = i + 1;
        let content = raw.split('#').next().unwrap_or_default().trim();
        let words: Vec<&str> = content.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let directive = parse_line(number, &words, &mut declared)?;
        lines.push(Line { number, text: words.join(" "), directive });
    }
    Ok(Scenario { name: name.to_owned(), lines })
}
