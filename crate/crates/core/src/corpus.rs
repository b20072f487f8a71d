//! Dataset model, ingestion, conversation-tree linearization and mixing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::budget::{DefaultTokenizer, Tokenizer};
use crate::rng::Lcg64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid_path: {0}")]
    InvalidPath(&'static str),
    #[error("no_positive_weight: at least one mixing weight must be positive")]
    NoPositiveWeight,
    #[error("weight_arity: {datasets} datasets but {weights} weights")]
    WeightArity { datasets: usize, weights: usize },
    #[error("invalid_weight: weight {0} is negative or not finite")]
    InvalidWeight(f64),
    #[error("malformed_document: {0}")]
    MalformedDocument(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CorpusError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidPath(_) => "invalid_path",
            Self::NoPositiveWeight => "no_positive_weight",
            Self::WeightArity { .. } => "weight_arity",
            Self::InvalidWeight(_) => "invalid_weight",
            Self::MalformedDocument(_) => "malformed_document",
            Self::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Bot,
}

impl Role {
    pub fn other(self) -> Self {
        match self {
            Role::Human => Role::Bot,
            Role::Bot => Role::Human,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(rename = "score", default, skip_serializing_if = "Option::is_none")]
    pub turn_score: Option<f64>,
}

impl Message {
    pub fn human(text: impl Into<String>) -> Self {
        Self {
            role: Role::Human,
            text: text.into(),
            turn_score: None,
        }
    }

    pub fn bot(text: impl Into<String>) -> Self {
        Self {
            role: Role::Bot,
            text: text.into(),
            turn_score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.turn_score = Some(score);
        self
    }
}

/// A linear conversation: alternating roles, starting with a human turn and
/// ending with a bot turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPath")]
pub struct ConversationPath {
    messages: Vec<Message>,
}

#[derive(Deserialize)]
struct RawPath {
    messages: Vec<Message>,
}

impl TryFrom<RawPath> for ConversationPath {
    type Error = CorpusError;

    fn try_from(raw: RawPath) -> Result<Self, Self::Error> {
        Self::new(raw.messages)
    }
}

impl ConversationPath {
    pub fn new(messages: Vec<Message>) -> Result<Self, CorpusError> {
        if messages.is_empty() {
            return Err(CorpusError::InvalidPath("empty"));
        }
        let mut expected = Role::Human;
        for m in &messages {
            if m.role != expected {
                return Err(CorpusError::InvalidPath(if expected == Role::Human {
                    "expected_human_turn"
                } else {
                    "expected_bot_turn"
                }));
            }
            expected = expected.other();
        }
        if messages.last().map(|m| m.role) != Some(Role::Bot) {
            return Err(CorpusError::InvalidPath("unanswered_turn"));
        }
        Ok(Self { messages })
    }

    pub fn from_exchanges<I>(exchanges: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (Message, Message)>,
    {
        let mut messages = Vec::new();
        for (h, b) in exchanges {
            messages.push(h);
            messages.push(b);
        }
        Self::new(messages)
    }

    pub fn qa(input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            messages: vec![Message::human(input), Message::bot(output)],
        }
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn into_messages(self) -> Vec<Message> {
        self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Human/bot pairs in order.
    pub fn exchanges(&self) -> impl Iterator<Item = (&Message, &Message)> {
        self.messages.chunks_exact(2).map(|c| (&c[0], &c[1]))
    }

    pub fn exchange_count(&self) -> usize {
        self.messages.len() / 2
    }

    /// Concatenated bot turns, separated by single spaces.
    pub fn bot_text(&self) -> String {
        let bots: Vec<&str> = self
            .messages
            .iter()
            .filter(|m| m.role == Role::Bot)
            .map(|m| m.text.as_str())
            .collect();
        bots.join(" ")
    }

    pub(crate) fn messages_mut(&mut self) -> &mut [Message] {
        &mut self.messages
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSummaryPair {
    pub document: String,
    pub summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Qa,
    Conversation,
    DocSummary,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Qa => "qa",
            RecordKind::Conversation => "conversation",
            RecordKind::DocSummary => "doc_summary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Qa(QaPair),
    Conversation(ConversationPath),
    DocSummary(DocSummaryPair),
}

impl Payload {
    pub fn kind(&self) -> RecordKind {
        match self {
            Payload::Qa(_) => RecordKind::Qa,
            Payload::Conversation(_) => RecordKind::Conversation,
            Payload::DocSummary(_) => RecordKind::DocSummary,
        }
    }

    /// The conversation view used for formatting and scoring. Q&A pairs and
    /// document/summary pairs become a single human/bot exchange.
    pub fn as_path(&self) -> ConversationPath {
        match self {
            Payload::Qa(qa) => ConversationPath::qa(qa.input.clone(), qa.output.clone()),
            Payload::Conversation(p) => p.clone(),
            Payload::DocSummary(d) => {
                ConversationPath::qa(d.document.clone(), d.summary.clone())
            }
        }
    }

    /// Text the model is trained to produce.
    pub fn response_text(&self) -> String {
        match self {
            Payload::Qa(qa) => qa.output.clone(),
            Payload::Conversation(p) => p.bot_text(),
            Payload::DocSummary(d) => d.summary.clone(),
        }
    }

    /// Every free-text field, in a fixed order.
    pub fn texts(&self) -> Vec<&str> {
        match self {
            Payload::Qa(qa) => vec![&qa.input, &qa.output],
            Payload::Conversation(p) => p.messages().iter().map(|m| m.text.as_str()).collect(),
            Payload::DocSummary(d) => vec![&d.document, &d.summary],
        }
    }

    /// Rewrite every free-text field in place.
    pub fn map_texts(&mut self, mut f: impl FnMut(&str) -> String) {
        match self {
            Payload::Qa(qa) => {
                qa.input = f(&qa.input);
                qa.output = f(&qa.output);
            }
            Payload::Conversation(p) => {
                for m in p.messages_mut() {
                    m.text = f(&m.text);
                }
            }
            Payload::DocSummary(d) => {
                d.document = f(&d.document);
                d.summary = f(&d.summary);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub source: String,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
    #[serde(flatten)]
    pub payload: Payload,
}

impl Record {
    pub fn new(id: impl Into<String>, source: impl Into<String>, payload: Payload) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            score: None,
            meta: BTreeMap::new(),
            payload,
        }
    }

    pub fn kind(&self) -> RecordKind {
        self.payload.kind()
    }

    /// Serialize a Q&A record back to its ingest line shape: `input`, `output`
    /// plus meta entries as top-level string fields.
    pub fn to_qa_value(&self) -> Option<Value> {
        let Payload::Qa(qa) = &self.payload else {
            return None;
        };
        let mut obj = serde_json::Map::new();
        for (k, v) in &self.meta {
            obj.insert(k.clone(), Value::String(v.clone()));
        }
        obj.insert("input".into(), Value::String(qa.input.clone()));
        obj.insert("output".into(), Value::String(qa.output.clone()));
        Some(Value::Object(obj))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    /// Build a dataset whose provenance is derived from record sources, in
    /// order of first appearance.
    pub fn from_records(records: Vec<Record>) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            let c = counts.entry(r.source.as_str()).or_insert(0);
            if *c == 0 {
                order.push(r.source.clone());
            }
            *c += 1;
        }
        let provenance = order
            .iter()
            .map(|s| Provenance {
                source: s.clone(),
                count: counts[s.as_str()],
            })
            .collect();
        Self {
            records,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Ids that occur more than once, in first-duplicate order.
    pub fn duplicate_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut dups = Vec::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                dups.push(r.id.as_str());
            }
        }
        dups
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSkip {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub lines_read: usize,
    pub skips: Vec<IngestSkip>,
}

impl IngestReport {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for s in &self.skips {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Read non-blank lines; yields (1-based line number, decoded line or reason).
fn for_each_line<R: BufRead>(
    mut reader: R,
    mut f: impl FnMut(usize, Result<&str, &'static str>),
) -> io::Result<usize> {
    let mut buf = Vec::new();
    let mut line_no = 0;
    let mut non_blank = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        match std::str::from_utf8(&buf) {
            Ok(s) => {
                let s = s.trim_end_matches(['\n', '\r']);
                if s.trim().is_empty() {
                    continue;
                }
                non_blank += 1;
                f(line_no, Ok(s));
            }
            Err(_) => {
                non_blank += 1;
                f(line_no, Err("invalid_utf8"));
            }
        }
    }
    Ok(non_blank)
}

fn required_text(obj: &serde_json::Map<String, Value>, field: &str) -> Result<String, String> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(format!("missing_field:{field}")),
        Some(Value::String(s)) if s.trim().is_empty() => Err(format!("empty_field:{field}")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(format!("not_string:{field}")),
    }
}

fn ingest_pairs<R: BufRead>(
    reader: R,
    source: &str,
    fields: (&str, &str),
    build: impl Fn(String, String) -> Payload,
) -> io::Result<(Dataset, IngestReport)> {
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    report.lines_read = for_each_line(reader, |line_no, line| {
        let parsed = line.map_err(str::to_string).and_then(|line| {
            let value: Value = serde_json::from_str(line).map_err(|_| "invalid_json".to_string())?;
            let Value::Object(obj) = value else {
                return Err("not_object".to_string());
            };
            let a = required_text(&obj, fields.0)?;
            let b = required_text(&obj, fields.1)?;
            let meta = obj
                .into_iter()
                .filter(|(k, _)| k != fields.0 && k != fields.1)
                .map(|(k, v)| match v {
                    Value::String(s) => (k, s),
                    other => (k, other.to_string()),
                })
                .collect();
            Ok((a, b, meta))
        });
        match parsed {
            Ok((a, b, meta)) => {
                let mut rec = Record::new(format!("{source}:{line_no}"), source, build(a, b));
                rec.meta = meta;
                records.push(rec);
            }
            Err(reason) => report.skips.push(IngestSkip {
                line: line_no,
                reason,
            }),
        }
    })?;
    let count = records.len();
    Ok((
        Dataset {
            records,
            provenance: vec![Provenance {
                source: source.to_string(),
                count,
            }],
        },
        report,
    ))
}

/// Ingest line-delimited `{"input": .., "output": ..}` objects. Malformed lines
/// are skipped and reported; they never abort the stream.
pub fn ingest_qa<R: BufRead>(reader: R, source: &str) -> io::Result<(Dataset, IngestReport)> {
    ingest_pairs(reader, source, ("input", "output"), |input, output| {
        Payload::Qa(QaPair { input, output })
    })
}

/// Ingest line-delimited `{"document": .., "summary": ..}` objects.
pub fn ingest_doc_summary<R: BufRead>(
    reader: R,
    source: &str,
) -> io::Result<(Dataset, IngestReport)> {
    ingest_pairs(reader, source, ("document", "summary"), |document, summary| {
        Payload::DocSummary(DocSummaryPair { document, summary })
    })
}

/// Read records previously written with [`write_records_jsonl`]. Ids are kept;
/// a repeated id is skipped with reason `duplicate_id`.
pub fn read_records_jsonl<R: BufRead>(reader: R) -> io::Result<(Dataset, IngestReport)> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut report = IngestReport::default();
    report.lines_read = for_each_line(reader, |line_no, line| {
        let parsed = line.map_err(str::to_string).and_then(|line| {
            let rec: Record =
                serde_json::from_str(line).map_err(|_| "invalid_record".to_string())?;
            if !seen.insert(rec.id.clone()) {
                return Err("duplicate_id".to_string());
            }
            Ok(rec)
        });
        match parsed {
            Ok(rec) => records.push(rec),
            Err(reason) => report.skips.push(IngestSkip {
                line: line_no,
                reason,
            }),
        }
    })?;
    Ok((Dataset::from_records(records), report))
}

pub fn write_records_jsonl<W: Write>(records: &[Record], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Write Q&A records in ingest shape. A non-Q&A record is an `InvalidInput` error.
pub fn write_qa_jsonl<W: Write>(records: &[Record], mut w: W) -> io::Result<()> {
    for r in records {
        let v = r.to_qa_value().ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("record {} is not a qa record", r.id),
            )
        })?;
        serde_json::to_writer(&mut w, &v)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Conversation trees

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: String,
    pub parent_id: Option<String>,
    pub message: Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TreeRejection {
    MalformedNode,
    DuplicateId,
    DanglingParent,
    Cycle,
    NoRoot,
    MultipleRoots,
    RoleAlternation,
    RootNotHuman,
}

impl TreeRejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MalformedNode => "malformed_node",
            Self::DuplicateId => "duplicate_id",
            Self::DanglingParent => "dangling_parent",
            Self::Cycle => "cycle",
            Self::NoRoot => "no_root",
            Self::MultipleRoots => "multiple_roots",
            Self::RoleAlternation => "role_alternation",
            Self::RootNotHuman => "root_not_human",
        }
    }
}

/// A validated dialogue tree. Children keep the order in which the nodes
/// were listed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationTree {
    nodes: Vec<TreeNode>,
    root: usize,
    children: Vec<Vec<usize>>,
}

impl ConversationTree {
    pub fn new(nodes: Vec<TreeNode>) -> Result<Self, TreeRejection> {
        let mut index: HashMap<&str, usize> = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(TreeRejection::DuplicateId);
            }
        }
        let mut parent = vec![None; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if let Some(p) = &n.parent_id {
                match index.get(p.as_str()) {
                    Some(&pi) => parent[i] = Some(pi),
                    None => return Err(TreeRejection::DanglingParent),
                }
            }
        }
        // Every ancestor chain must terminate within n steps.
        for start in 0..nodes.len() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                steps += 1;
                if p == start || steps > nodes.len() {
                    return Err(TreeRejection::Cycle);
                }
                cur = p;
            }
        }
        let roots: Vec<usize> = (0..nodes.len()).filter(|&i| parent[i].is_none()).collect();
        let root = match roots.as_slice() {
            [] => return Err(TreeRejection::NoRoot),
            [r] => *r,
            _ => return Err(TreeRejection::MultipleRoots),
        };
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                if nodes[*p].message.role == nodes[i].message.role {
                    return Err(TreeRejection::RoleAlternation);
                }
            }
        }
        if nodes[root].message.role != Role::Human {
            return Err(TreeRejection::RootNotHuman);
        }
        let mut children = vec![Vec::new(); nodes.len()];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        Ok(Self {
            nodes,
            root,
            children,
        })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[self.root]
    }

    pub fn leaf_count(&self) -> usize {
        self.children.iter().filter(|c| c.is_empty()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeRejectionEntry {
    pub tree: usize,
    pub reason: TreeRejection,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TreeIngestReport {
    pub trees_read: usize,
    pub rejected: Vec<TreeRejectionEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireId {
    Text(String),
    Int(i64),
}

impl WireId {
    fn into_string(self) -> String {
        match self {
            WireId::Text(s) => s,
            WireId::Int(i) => i.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct WireNode {
    id: WireId,
    #[serde(default)]
    parent_id: Option<WireId>,
    role: Role,
    text: String,
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Deserialize)]
struct WireTree {
    nodes: Vec<Value>,
}

#[derive(Deserialize)]
struct WireDocument {
    trees: Vec<Value>,
}

/// Parse `{"trees": [{"nodes": [...]}]}`. Invalid trees are rejected whole and
/// reported by index; only a document that is not valid JSON of that shape is
/// an error.
pub fn ingest_conversation_trees<R: io::Read>(
    reader: R,
) -> Result<(Vec<ConversationTree>, TreeIngestReport), CorpusError> {
    let doc: WireDocument = serde_json::from_reader(reader)
        .map_err(|e| CorpusError::MalformedDocument(e.to_string()))?;
    let mut trees = Vec::new();
    let mut report = TreeIngestReport {
        trees_read: doc.trees.len(),
        rejected: Vec::new(),
    };
    for (ti, raw) in doc.trees.into_iter().enumerate() {
        match parse_tree(raw) {
            Ok(t) => trees.push(t),
            Err(reason) => report.rejected.push(TreeRejectionEntry { tree: ti, reason }),
        }
    }
    Ok((trees, report))
}

fn parse_tree(raw: Value) -> Result<ConversationTree, TreeRejection> {
    let tree: WireTree = serde_json::from_value(raw).map_err(|_| TreeRejection::MalformedNode)?;
    let nodes = tree
        .nodes
        .into_iter()
        .map(|v| {
            let n: WireNode = serde_json::from_value(v).map_err(|_| TreeRejection::MalformedNode)?;
            Ok(TreeNode {
                id: n.id.into_string(),
                parent_id: n.parent_id.map(WireId::into_string),
                message: Message {
                    role: n.role,
                    text: n.text,
                    turn_score: n.score,
                },
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    ConversationTree::new(nodes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linearized {
    pub paths: Vec<ConversationPath>,
    /// Leaves whose root-to-leaf sequence ends in an unanswered human turn.
    pub dropped: usize,
}

/// One path per leaf, in depth-first order with children visited in stored
/// order. Leaves ending on a human turn are dropped and counted.
pub fn linearize_tree(tree: &ConversationTree) -> Linearized {
    let mut out = Linearized {
        paths: Vec::new(),
        dropped: 0,
    };
    let mut trail: Vec<usize> = Vec::new();
    // (node, depth) with children pushed in reverse so they pop in order
    let mut stack = vec![(tree.root, 0usize)];
    while let Some((node, depth)) = stack.pop() {
        trail.truncate(depth);
        trail.push(node);
        let kids = &tree.children[node];
        if kids.is_empty() {
            let messages: Vec<Message> =
                trail.iter().map(|&i| tree.nodes[i].message.clone()).collect();
            match ConversationPath::new(messages) {
                Ok(p) => out.paths.push(p),
                Err(_) => out.dropped += 1,
            }
        } else {
            for &c in kids.iter().rev() {
                stack.push((c, depth + 1));
            }
        }
    }
    out
}

/// Leaf ids in depth-first order; exposed for diagnostics.
pub fn tree_leaf_ids(tree: &ConversationTree) -> Vec<&str> {
    (0..tree.nodes.len())
        .filter(|&i| tree.children[i].is_empty())
        .map(|i| tree.nodes[i].id.as_str())
        .collect()
}

/// Turn validated trees into conversation records `<source>:<ordinal>`.
pub fn trees_to_dataset(trees: &[ConversationTree], source: &str) -> (Dataset, usize) {
    let mut records = Vec::new();
    let mut dropped = 0;
    for t in trees {
        let lin = linearize_tree(t);
        dropped += lin.dropped;
        for p in lin.paths {
            let id = format!("{source}:{}", records.len() + 1);
            records.push(Record::new(id, source, Payload::Conversation(p)));
        }
    }
    let count = records.len();
    (
        Dataset {
            records,
            provenance: vec![Provenance {
                source: source.to_string(),
                count,
            }],
        },
        dropped,
    )
}

// ---------------------------------------------------------------------------
// Mixing

/// Interleave datasets by seeded weighted choice among non-exhausted sources,
/// popping the front record of the chosen source. Sources with weight zero
/// contribute nothing.
pub fn mix(datasets: &[Dataset], weights: &[f64], seed: u64) -> Result<Dataset, CorpusError> {
    if datasets.len() != weights.len() {
        return Err(CorpusError::WeightArity {
            datasets: datasets.len(),
            weights: weights.len(),
        });
    }
    if let Some(&w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(CorpusError::InvalidWeight(w));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(CorpusError::NoPositiveWeight);
    }

    let mut rng = Lcg64::new(seed);
    let mut cursor = vec![0usize; datasets.len()];
    let total: usize = datasets
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(d, _)| d.len())
        .sum();
    let mut records = Vec::with_capacity(total);
    loop {
        let live: Vec<usize> = (0..datasets.len())
            .filter(|&i| weights[i] > 0.0 && cursor[i] < datasets[i].len())
            .collect();
        if live.is_empty() {
            break;
        }
        let sum: f64 = live.iter().map(|&i| weights[i]).sum();
        let target = rng.next_unit() * sum;
        let mut acc = 0.0;
        let mut chosen = *live.last().expect("non-empty");
        for &i in &live {
            acc += weights[i];
            if target < acc {
                chosen = i;
                break;
            }
        }
        records.push(datasets[chosen].records[cursor[chosen]].clone());
        cursor[chosen] += 1;
    }

    let provenance = datasets
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .flat_map(|(d, _)| d.provenance.iter().cloned())
        .collect();
    Ok(Dataset {
        records,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Percentiles {
    pub min: usize,
    pub p50: usize,
    pub p90: usize,
    pub p99: usize,
    pub max: usize,
}

/// Nearest-rank percentile over a sorted slice; `None` when empty.
pub fn nearest_rank(sorted: &[usize], pct: f64) -> Option<usize> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

impl Percentiles {
    fn from_counts(mut v: Vec<usize>) -> Option<Self> {
        v.sort_unstable();
        Some(Self {
            min: *v.first()?,
            p50: nearest_rank(&v, 50.0)?,
            p90: nearest_rank(&v, 90.0)?,
            p99: nearest_rank(&v, 99.0)?,
            max: *v.last()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub records: usize,
    pub by_kind: BTreeMap<String, usize>,
    /// Token-count percentiles per payload field; absent for fields with no
    /// observations.
    pub tokens: BTreeMap<String, Percentiles>,
    /// Ten equal-width bins over [0, 1].
    pub score_histogram: [usize; 10],
    pub unscored: usize,
}

pub fn dataset_stats(d: &Dataset) -> DatasetStats {
    let tok = DefaultTokenizer;
    let mut by_kind = BTreeMap::new();
    let mut fields: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
    let mut hist = [0usize; 10];
    let mut unscored = 0;
    for r in &d.records {
        *by_kind.entry(r.kind().as_str().to_string()).or_insert(0) += 1;
        let mut push = |f: &'static str, t: &str| fields.entry(f).or_default().push(tok.count(t));
        match &r.payload {
            Payload::Qa(qa) => {
                push("input", &qa.input);
                push("output", &qa.output);
            }
            Payload::Conversation(p) => {
                let total = p.messages().iter().map(|m| tok.count(&m.text)).sum();
                fields.entry("conversation").or_default().push(total);
            }
            Payload::DocSummary(ds) => {
                push("document", &ds.document);
                push("summary", &ds.summary);
            }
        }
        match r.score {
            Some(s) if s.is_finite() => {
                let bin = ((s.clamp(0.0, 1.0) * 10.0) as usize).min(9);
                hist[bin] += 1;
            }
            _ => unscored += 1,
        }
    }
    let tokens = fields
        .into_iter()
        .filter_map(|(k, v)| Percentiles::from_counts(v).map(|p| (k.to_string(), p)))
        .collect();
    DatasetStats {
        records: d.len(),
        by_kind,
        tokens,
        score_histogram: hist,
        unscored,
    }
}
