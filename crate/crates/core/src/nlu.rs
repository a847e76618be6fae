//! Rule-based intent classifier and slot filler.
//!
//! Intent patterns are compiled from the user dataset: every labeled utterance
//! becomes a token sequence in which ten-digit runs stand for an account
//! number and other integers for an amount. An utterance matches a pattern
//! when the pattern's tokens occur in it in order (gaps allowed). The longest
//! matching pattern wins; ties go to the lowest pattern id.
//!
//! Multi-turn state lives in a [`Conversation`]. A complete transfer is never
//! actionable until the user affirms it on a following turn.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::chaincode::AccountNumber;

const SHIPPED_USER_DATASET: &str = include_str!("../data/user_dataset.json");
const SHIPPED_BOT_DATASET: &str = include_str!("../data/bot_dataset.json");

const AFFIRM: &[&str] = &["yes", "y", "yeah", "yep", "confirm", "confirmed", "ok", "okay", "sure", "proceed"];
const DENY: &[&str] = &["no", "n", "nope", "cancel", "stop", "abort", "deny"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NluError {
    #[error("NLU credential rejected")]
    Unauthorized,
    #[error("utterance is empty")]
    EmptyUtterance,
    #[error("a bot turn must follow the previous user turn")]
    OutOfTurn,
    #[error("{file}: {reason}")]
    Load { file: String, reason: String },
    #[error("{file}: record {record}: {reason}")]
    Schema { file: String, record: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intent {
    #[serde(rename = "balQuery")]
    BalQuery,
    #[serde(rename = "transfer")]
    Transfer,
    #[serde(rename = "smalltalk")]
    Smalltalk,
    #[serde(rename = "unknown")]
    Unknown,
}

impl Intent {
    pub fn as_str(&self) -> &'static str {
        match self {
            Intent::BalQuery => "balQuery",
            Intent::Transfer => "transfer",
            Intent::Smalltalk => "smalltalk",
            Intent::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityKind {
    #[serde(rename = "accountNumber")]
    AccountNumber,
    #[serde(rename = "amount")]
    Amount,
    #[serde(rename = "intentMarker")]
    IntentMarker,
}

/// Character offsets, end exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Entity {
    pub kind: EntityKind,
    pub value: String,
    /// Where the value was read, in the utterance of the turn that supplied it.
    pub source_span: Span,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub intent: Intent,
    pub entities: Vec<Entity>,
    pub complete: bool,
}

impl EntitySet {
    fn unknown() -> EntitySet {
        EntitySet { intent: Intent::Unknown, entities: Vec::new(), complete: false }
    }

    pub fn value(&self, kind: EntityKind) -> Option<&str> {
        self.entities.iter().find(|e| e.kind == kind).map(|e| e.value.as_str())
    }

    pub fn account_number(&self) -> Option<AccountNumber> {
        self.value(EntityKind::AccountNumber).and_then(|v| v.parse().ok())
    }

    pub fn amount(&self) -> Option<u64> {
        self.value(EntityKind::Amount).and_then(|v| v.parse().ok())
    }

    pub fn is_affirmed(&self) -> bool {
        self.value(EntityKind::IntentMarker) == Some("affirm")
    }

    pub fn is_denied(&self) -> bool {
        self.value(EntityKind::IntentMarker) == Some("deny")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Pending {
    intent: Option<Intent>,
    account: Option<Entity>,
    amount: Option<Entity>,
    awaiting_confirmation: bool,
}

/// Per-session dialogue state.
#[derive(Clone, Debug)]
pub struct Conversation {
    pub session_id: String,
    /// The session user's own account, used to resolve balance queries.
    pub own_account: Option<AccountNumber>,
    history: Vec<Utterance>,
    pending: Pending,
    last: Option<EntitySet>,
}

impl Conversation {
    pub fn new(session_id: impl Into<String>, own_account: Option<AccountNumber>) -> Conversation {
        Conversation {
            session_id: session_id.into(),
            own_account,
            history: Vec::new(),
            pending: Pending::default(),
            last: None,
        }
    }

    pub fn history(&self) -> &[Utterance] {
        &self.history
    }

    pub fn pending_intent(&self) -> Option<Intent> {
        self.pending.intent
    }

    pub fn awaiting_confirmation(&self) -> bool {
        self.pending.awaiting_confirmation
    }

    fn next_index(&self) -> usize {
        self.history.len()
    }
}

/// Shared secret between the gateway and the NLU engine.
#[derive(Clone)]
pub struct NluCredential(pub [u8; 32]);

impl NluCredential {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn generate() -> NluCredential {
        use rand::RngCore;
        let mut out = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut out);
        NluCredential(out)
    }

    fn matches(&self, other: &NluCredential) -> bool {
        self.0.ct_eq(&other.0).into()
    }
}

impl fmt::Debug for NluCredential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("NluCredential(..)")
    }
}

impl FromStr for NluCredential {
    type Err = NluError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out).map_err(|_| NluError::Unauthorized)?;
        Ok(NluCredential(out))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Token {
    Word(String),
    Account(String),
    Amount(String),
    /// Digit run that is neither an account number nor a positive amount.
    Number,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PatternToken<'a> {
    Word(&'a str),
    Account,
    Amount,
}

fn tokenize(text: &str) -> Vec<(Token, Span)> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let digits: String = chars[start..i].iter().collect();
            let token = if digits.len() == 10 {
                Token::Account(digits)
            } else {
                match digits.parse::<u64>() {
                    Ok(n) if n > 0 => Token::Amount(n.to_string()),
                    _ => Token::Number,
                }
            };
            out.push((token, Span { start, end: i }));
        } else if c.is_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_alphabetic() {
                i += 1;
            }
            let word: String = chars[start..i].iter().flat_map(|c| c.to_lowercase()).collect();
            out.push((Token::Word(word), Span { start, end: i }));
        } else {
            i += 1;
        }
    }
    out
}

/// Pulls account numbers and amounts out of `text` in order of appearance.
pub fn extract_entities(text: &str) -> Vec<Entity> {
    tokenize(text)
        .into_iter()
        .filter_map(|(t, span)| match t {
            Token::Account(v) => Some(Entity { kind: EntityKind::AccountNumber, value: v, source_span: span }),
            Token::Amount(v) => Some(Entity { kind: EntityKind::Amount, value: v, source_span: span }),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotLabels {
    #[serde(rename = "accountNumber", default, skip_serializing_if = "Option::is_none")]
    pub account_number: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amount: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRecord {
    pub id: u32,
    pub pattern: String,
    pub intent: Intent,
    pub slots: SlotLabels,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BotTemplate {
    pub template_id: String,
    pub intent: Intent,
    pub missing_slot: Option<String>,
    pub text: String,
}

const MISSING_SLOTS: &[&str] = &["all", "accountNumber", "amount", "confirmation", "cancelled"];
const PLACEHOLDERS: &[&str] = &["{toAcc}", "{amount}"];

#[derive(Clone, Debug)]
struct CompiledPattern {
    id: u32,
    intent: Intent,
    tokens: Vec<CompiledToken>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum CompiledToken {
    Word(String),
    Account,
    Amount,
}

impl CompiledPattern {
    fn matches(&self, utterance: &[PatternToken<'_>]) -> bool {
        let mut it = utterance.iter();
        self.tokens.iter().all(|want| {
            it.by_ref().any(|got| match (want, got) {
                (CompiledToken::Word(w), PatternToken::Word(g)) => w == g,
                (CompiledToken::Account, PatternToken::Account) => true,
                (CompiledToken::Amount, PatternToken::Amount) => true,
                _ => false,
            })
        })
    }
}

/// Compiled user and bot datasets. Immutable once built.
#[derive(Clone, Debug)]
pub struct PatternTables {
    patterns: Vec<CompiledPattern>,
    records: Vec<UserRecord>,
    templates: Vec<BotTemplate>,
}

fn parse_records<T: for<'de> Deserialize<'de>>(file: &str, text: &str, id_of: impl Fn(&T) -> String) -> Result<Vec<T>, NluError> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(text)
        .map_err(|e| NluError::Load { file: file.to_owned(), reason: e.to_string() })?;
    if raw.is_empty() {
        return Err(NluError::Load { file: file.to_owned(), reason: "dataset is empty".into() });
    }
    let mut out = Vec::with_capacity(raw.len());
    let mut seen = BTreeSet::new();
    for (i, v) in raw.into_iter().enumerate() {
        let rec: T = serde_json::from_value(v).map_err(|e| NluError::Schema {
            file: file.to_owned(),
            record: format!("#{i}"),
            reason: e.to_string(),
        })?;
        let id = id_of(&rec);
        if !seen.insert(id.clone()) {
            return Err(NluError::Schema { file: file.to_owned(), record: id, reason: "duplicate id".into() });
        }
        out.push(rec);
    }
    Ok(out)
}

impl PatternTables {
    /// The corpus bundled with the crate.
    pub fn shipped() -> PatternTables {
        PatternTables::from_json(SHIPPED_USER_DATASET, SHIPPED_BOT_DATASET).expect("shipped datasets are valid")
    }

    pub fn from_json(user_json: &str, bot_json: &str) -> Result<PatternTables, NluError> {
        PatternTables::build("user dataset", user_json, "bot dataset", bot_json)
    }

    fn build(user_file: &str, user_json: &str, bot_file: &str, bot_json: &str) -> Result<PatternTables, NluError> {
        let records: Vec<UserRecord> = parse_records(user_file, user_json, |r: &UserRecord| r.id.to_string())?;
        let schema = |record: String, reason: &str| NluError::Schema {
            file: user_file.to_owned(),
            record,
            reason: reason.to_owned(),
        };
        let mut patterns = Vec::with_capacity(records.len());
        for r in &records {
            let id = r.id.to_string();
            if r.intent == Intent::Unknown {
                return Err(schema(id, "intent unknown cannot be trained"));
            }
            if let Some(a) = &r.slots.account_number {
                if !AccountNumber::is_valid(a) {
                    return Err(schema(id, "accountNumber must be ten digits"));
                }
            }
            if let Some(a) = &r.slots.amount {
                if !matches!(a.parse::<u64>(), Ok(n) if n > 0 && n.to_string() == *a) {
                    return Err(schema(id, "amount must be a positive integer"));
                }
            }
            let tokens: Vec<CompiledToken> = tokenize(&r.pattern)
                .into_iter()
                .filter_map(|(t, _)| match t {
                    Token::Word(w) => Some(CompiledToken::Word(w)),
                    Token::Account(_) => Some(CompiledToken::Account),
                    Token::Amount(_) => Some(CompiledToken::Amount),
                    Token::Number => None,
                })
                .collect();
            if tokens.is_empty() {
                return Err(schema(id, "pattern has no tokens"));
            }
            patterns.push(CompiledPattern { id: r.id, intent: r.intent, tokens });
        }
        patterns.sort_by_key(|p| p.id);

        let templates: Vec<BotTemplate> =
            parse_records(bot_file, bot_json, |t: &BotTemplate| t.template_id.clone())?;
        for t in &templates {
            let bad = |reason: &str| NluError::Schema {
                file: bot_file.to_owned(),
                record: t.template_id.clone(),
                reason: reason.to_owned(),
            };
            if t.template_id.is_empty() || t.text.trim().is_empty() {
                return Err(bad("template_id and text must be non-empty"));
            }
            if let Some(slot) = &t.missing_slot {
                if !MISSING_SLOTS.contains(&slot.as_str()) {
                    return Err(bad("unknown missing_slot"));
                }
            }
            let mut rest = t.text.as_str();
            while let Some(open) = rest.find('{') {
                let close = rest[open..].find('}').ok_or_else(|| bad("unterminated placeholder"))?;
                if !PLACEHOLDERS.contains(&&rest[open..=open + close]) {
                    return Err(bad("unknown placeholder"));
                }
                rest = &rest[open + close + 1..];
            }
        }
        Ok(PatternTables { patterns, records, templates })
    }

    pub fn records(&self) -> &[UserRecord] {
        &self.records
    }

    pub fn templates(&self) -> &[BotTemplate] {
        &self.templates
    }

    pub fn intents(&self) -> BTreeSet<Intent> {
        self.records.iter().map(|r| r.intent).collect()
    }

    /// Best pattern for `text`, if any.
    pub fn classify(&self, text: &str) -> Option<(u32, Intent)> {
        let toks = tokenize(text);
        let shape: Vec<PatternToken<'_>> = toks
            .iter()
            .filter_map(|(t, _)| match t {
                Token::Word(w) => Some(PatternToken::Word(w)),
                Token::Account(_) => Some(PatternToken::Account),
                Token::Amount(_) => Some(PatternToken::Amount),
                Token::Number => None,
            })
            .collect();
        self.patterns
            .iter()
            .filter(|p| p.matches(&shape))
            // max by length, then min by id: patterns are sorted by id so the
            // first of equal length is kept
            .fold(None::<&CompiledPattern>, |best, p| match best {
                Some(b) if b.tokens.len() >= p.tokens.len() => Some(b),
                _ => Some(p),
            })
            .map(|p| (p.id, p.intent))
    }

    fn templates_for(&self, intent: Intent, missing: Option<&str>) -> Vec<&BotTemplate> {
        self.templates.iter().filter(|t| t.intent == intent && t.missing_slot.as_deref() == missing).collect()
    }
}

/// Reads both dataset files and compiles them.
pub fn load_datasets(user_dataset_path: impl AsRef<Path>, bot_dataset_path: impl AsRef<Path>) -> Result<PatternTables, NluError> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|e| NluError::Load { file: p.display().to_string(), reason: e.to_string() })
    };
    let (u, b) = (user_dataset_path.as_ref(), bot_dataset_path.as_ref());
    PatternTables::build(&u.display().to_string(), &read(u)?, &b.display().to_string(), &read(b)?)
}

fn marker(value: &str, span: Span) -> Entity {
    Entity { kind: EntityKind::IntentMarker, value: value.to_owned(), source_span: span }
}

/// The classifier bound to the credential it accepts.
#[derive(Clone, Debug)]
pub struct NluEngine {
    tables: PatternTables,
    credential: NluCredential,
}

impl NluEngine {
    pub fn new(tables: PatternTables, credential: NluCredential) -> NluEngine {
        NluEngine { tables, credential }
    }

    pub fn tables(&self) -> &PatternTables {
        &self.tables
    }

    /// Classifies `utterance`, extracts its entities and merges them into the
    /// conversation's pending slots.
    pub fn d_flow_model(
        &self,
        conversation: &mut Conversation,
        utterance: &str,
        credential: &NluCredential,
    ) -> Result<EntitySet, NluError> {
        if !self.credential.matches(credential) {
            return Err(NluError::Unauthorized);
        }
        let text = utterance.trim();
        if text.is_empty() {
            return Err(NluError::EmptyUtterance);
        }
        if conversation.history.last().is_some_and(|u| u.speaker == Speaker::User) {
            return Err(NluError::OutOfTurn);
        }
        conversation.history.push(Utterance {
            speaker: Speaker::User,
            text: text.to_owned(),
            turn_index: conversation.next_index(),
        });
        let set = self.interpret(conversation, text);
        conversation.last = Some(set.clone());
        Ok(set)
    }

    fn interpret(&self, conv: &mut Conversation, text: &str) -> EntitySet {
        let classified = self.tables.classify(text).map(|(_, i)| i);

        if conv.pending.awaiting_confirmation && !matches!(classified, Some(Intent::Transfer | Intent::BalQuery)) {
            let toks = tokenize(text);
            let word = |set: &[&str]| {
                toks.iter().find_map(|(t, span)| match t {
                    Token::Word(w) if set.contains(&w.as_str()) => Some(*span),
                    _ => None,
                })
            };
            if let Some(span) = word(DENY) {
                let mut set = self.transfer_set(conv);
                set.entities.push(marker("deny", span));
                set.complete = false;
                conv.pending = Pending::default();
                return set;
            }
            if let Some(span) = word(AFFIRM) {
                let mut set = self.transfer_set(conv);
                set.entities.push(marker("affirm", span));
                conv.pending = Pending::default();
                return set;
            }
        }

        let entities = extract_entities(text);
        let first = |k: EntityKind| entities.iter().find(|e| e.kind == k).cloned();
        match classified {
            Some(Intent::Transfer) => {
                if conv.pending.intent != Some(Intent::Transfer) {
                    conv.pending = Pending { intent: Some(Intent::Transfer), ..Pending::default() };
                }
                self.merge_transfer(conv, first(EntityKind::AccountNumber), first(EntityKind::Amount))
            }
            Some(Intent::BalQuery) => {
                conv.pending = Pending::default();
                EntitySet { intent: Intent::BalQuery, entities: Vec::new(), complete: conv.own_account.is_some() }
            }
            Some(Intent::Smalltalk) => EntitySet { intent: Intent::Smalltalk, entities: Vec::new(), complete: false },
            Some(Intent::Unknown) | None => {
                // bare slot values answer the pending question
                let acc = first(EntityKind::AccountNumber);
                let amt = first(EntityKind::Amount);
                if conv.pending.intent == Some(Intent::Transfer) && (acc.is_some() || amt.is_some()) {
                    self.merge_transfer(conv, acc, amt)
                } else {
                    EntitySet::unknown()
                }
            }
        }
    }

    fn merge_transfer(&self, conv: &mut Conversation, acc: Option<Entity>, amt: Option<Entity>) -> EntitySet {
        if acc.is_some() {
            conv.pending.account = acc;
        }
        if amt.is_some() {
            conv.pending.amount = amt;
        }
        let set = self.transfer_set(conv);
        conv.pending.awaiting_confirmation = set.complete;
        set
    }

    fn transfer_set(&self, conv: &Conversation) -> EntitySet {
        let entities: Vec<Entity> = conv.pending.account.iter().chain(conv.pending.amount.iter()).cloned().collect();
        let complete = conv.pending.account.is_some() && conv.pending.amount.is_some();
        EntitySet { intent: Intent::Transfer, entities, complete }
    }

    /// Picks and renders the bot reply for `entity_set` and records it as the
    /// bot's turn.
    pub fn next_bot_response(&self, entity_set: &EntitySet, conversation: &mut Conversation) -> Utterance {
        let missing = match entity_set.intent {
            Intent::Transfer if entity_set.is_denied() => Some("cancelled"),
            Intent::Transfer if entity_set.complete && entity_set.is_affirmed() => None,
            Intent::Transfer if entity_set.complete => Some("confirmation"),
            Intent::Transfer => match (entity_set.account_number(), entity_set.amount()) {
                (None, None) => Some("all"),
                (None, Some(_)) => Some("accountNumber"),
                _ => Some("amount"),
            },
            Intent::BalQuery if !entity_set.complete => Some("accountNumber"),
            _ => None,
        };
        let turn_index = conversation.next_index();
        let mut options = self.tables.templates_for(entity_set.intent, missing);
        if options.is_empty() {
            options = self.tables.templates_for(Intent::Unknown, None);
        }
        let text = match options.get(turn_index / 2 % options.len().max(1)) {
            Some(t) => t
                .text
                .replace("{toAcc}", entity_set.value(EntityKind::AccountNumber).unwrap_or("?"))
                .replace("{amount}", entity_set.value(EntityKind::Amount).unwrap_or("?")),
            None => "Sorry, I did not understand that.".to_owned(),
        };
        let reply = Utterance { speaker: Speaker::Bot, text, turn_index };
        conversation.history.push(reply.clone());
        reply
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NluRequest {
    pub session_id: String,
    pub utterance: String,
    pub secret_key: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NluResponse {
    pub intent: Intent,
    pub entities: Vec<Entity>,
    pub complete: bool,
    pub bot_text: String,
}

impl NluResponse {
    pub fn entity_set(&self) -> EntitySet {
        EntitySet { intent: self.intent, entities: self.entities.clone(), complete: self.complete }
    }
}

type AccountResolver = Box<dyn Fn(&str) -> Option<AccountNumber> + Send + Sync>;

/// Session-keyed front end over [`NluEngine`]. Conversations are created on
/// first contact; `resolver` maps a session id to the user's own account.
pub struct NluService {
    engine: NluEngine,
    resolver: AccountResolver,
    conversations: Mutex<HashMap<String, Conversation>>,
}

impl NluService {
    pub fn new(engine: NluEngine, resolver: impl Fn(&str) -> Option<AccountNumber> + Send + Sync + 'static) -> NluService {
        NluService { engine, resolver: Box::new(resolver), conversations: Mutex::new(HashMap::new()) }
    }

    pub fn engine(&self) -> &NluEngine {
        &self.engine
    }

    pub fn handle(&self, request: &NluRequest) -> Result<NluResponse, NluError> {
        let credential: NluCredential = request.secret_key.parse()?;
        let mut map = self.conversations.lock().expect("conversation lock");
        let conv = map
            .entry(request.session_id.clone())
            .or_insert_with(|| Conversation::new(request.session_id.clone(), (self.resolver)(&request.session_id)));
        let set = self.engine.d_flow_model(conv, &request.utterance, &credential)?;
        let bot = self.engine.next_bot_response(&set, conv);
        Ok(NluResponse { intent: set.intent, entities: set.entities, complete: set.complete, bot_text: bot.text })
    }

    pub fn end_session(&self, session_id: &str) {
        self.conversations.lock().expect("conversation lock").remove(session_id);
    }

    pub fn conversation(&self, session_id: &str) -> Option<Conversation> {
        self.conversations.lock().expect("conversation lock").get(session_id).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine() -> (NluEngine, NluCredential) {
        let key = NluCredential([7; 32]);
        (NluEngine::new(PatternTables::shipped(), key.clone()), key)
    }

    fn turn(e: &NluEngine, c: &mut Conversation, k: &NluCredential, text: &str) -> (EntitySet, String) {
        let set = e.d_flow_model(c, text, k).unwrap();
        let bot = e.next_bot_response(&set, c);
        (set, bot.text)
    }

    fn pairs(set: &EntitySet) -> Vec<(EntityKind, &str)> {
        set.entities.iter().map(|e| (e.kind, e.value.as_str())).collect()
    }

    #[test]
    fn shipped_corpus_meets_minimums() {
        let t = PatternTables::shipped();
        assert!(t.intents().len() >= 3);
        assert!(t.records().len() >= 20);
        assert!(t.templates().len() >= 10);
    }

    #[test]
    fn headline_utterance() {
        let (e, k) = engine();
        let mut c = Conversation::new("s", None);
        let set = e.d_flow_model(&mut c, "send account no 1123158964 1000 unit", &k).unwrap();
        assert_eq!(set.intent, Intent::Transfer);
        assert!(set.complete);
        assert_eq!(pairs(&set), vec![(EntityKind::AccountNumber, "1123158964"), (EntityKind::Amount, "1000")]);
        assert_eq!(set.entities[0].source_span, Span { start: 16, end: 26 });
    }

    #[test]
    fn basic_intents() {
        let (e, k) = engine();
        let mut c = Conversation::new("s", Some(AccountNumber::from_sequence(1_000_000_001).unwrap()));
        let (set, _) = turn(&e, &mut c, &k, "what is my balance");
        assert_eq!(set.intent, Intent::BalQuery);
        assert!(set.complete);
        let (set, _) = turn(&e, &mut c, &k, "hello");
        assert_eq!(set, EntitySet { intent: Intent::Smalltalk, entities: vec![], complete: false });
        let (set, text) = turn(&e, &mut c, &k, "purple elephants 42");
        assert_eq!(set, EntitySet::unknown());
        assert!(text.contains("not"), "{text}");
    }

    #[test]
    fn ten_digits_is_never_an_amount() {
        let ents = extract_entities("pay 0000000042 and 42 then 12345678901 and 0");
        let got: Vec<_> = ents.iter().map(|e| (e.kind, e.value.as_str())).collect();
        assert_eq!(
            got,
            vec![
                (EntityKind::AccountNumber, "0000000042"),
                (EntityKind::Amount, "42"),
                (EntityKind::Amount, "12345678901"),
            ]
        );
    }

    #[test]
    fn bad_credential_never_returns_entities() {
        let (e, _) = engine();
        let mut c = Conversation::new("s", None);
        let r = e.d_flow_model(&mut c, "send 5 to 1123158964", &NluCredential([8; 32]));
        assert_eq!(r, Err(NluError::Unauthorized));
        assert!(c.history().is_empty());
    }

    #[test]
    fn slot_filling_then_confirmation() {
        let (e, k) = engine();
        let mut c = Conversation::new("s", None);
        let (set, text) = turn(&e, &mut c, &k, "I want to send money");
        assert!(!set.complete);
        assert!(text.contains("Which account"), "{text}");
        let (set, text) = turn(&e, &mut c, &k, "to 1123158964");
        assert!(!set.complete);
        assert_eq!(text, "How much would you like to send?");
        let (set, text) = turn(&e, &mut c, &k, "1000 units");
        assert!(set.complete && !set.is_affirmed());
        assert!(text.contains("1000") && text.contains("1123158964"), "{text}");
        assert!(c.awaiting_confirmation());
        let (set, _) = turn(&e, &mut c, &k, "yes");
        assert!(set.complete && set.is_affirmed());
        assert_eq!(set.amount(), Some(1000));
        assert_eq!(c.pending_intent(), None);
    }

    #[test]
    fn deny_cancels() {
        let (e, k) = engine();
        let mut c = Conversation::new("s", None);
        turn(&e, &mut c, &k, "send 10 to 1123158964");
        let (set, text) = turn(&e, &mut c, &k, "no");
        assert!(set.is_denied() && !set.complete);
        assert!(text.contains("cancelled"));
        // affirming afterwards does nothing
        let (set, _) = turn(&e, &mut c, &k, "yes");
        assert_eq!(set.intent, Intent::Unknown);
    }

    #[test]
    fn turns_must_alternate() {
        let (e, k) = engine();
        let mut c = Conversation::new("s", None);
        e.d_flow_model(&mut c, "hi", &k).unwrap();
        assert_eq!(e.d_flow_model(&mut c, "hi", &k), Err(NluError::OutOfTurn));
    }

    #[test]
    fn tie_break_prefers_longest_then_lowest_id() {
        let user = r#"[
            {"id": 5, "pattern": "send money", "intent": "transfer", "slots": {}},
            {"id": 3, "pattern": "money please", "intent": "smalltalk", "slots": {}},
            {"id": 9, "pattern": "money", "intent": "balQuery", "slots": {}}
        ]"#;
        let bot = r#"[{"template_id": "f", "intent": "unknown", "missing_slot": null, "text": "?"}]"#;
        let t = PatternTables::from_json(user, bot).unwrap();
        assert_eq!(t.classify("send money please"), Some((3, Intent::Smalltalk)));
        assert_eq!(t.classify("money"), Some((9, Intent::BalQuery)));
        assert_eq!(t.classify("send some money"), Some((5, Intent::Transfer)));
    }

    #[test]
    fn load_errors_name_the_record() {
        let bot = r#"[{"template_id": "f", "intent": "unknown", "missing_slot": null, "text": "?"}]"#;
        assert!(matches!(PatternTables::from_json("[]", bot), Err(NluError::Load { .. })));
        let dup = r#"[{"id":1,"pattern":"a","intent":"smalltalk","slots":{}},{"id":1,"pattern":"b","intent":"smalltalk","slots":{}}]"#;
        assert!(matches!(PatternTables::from_json(dup, bot), Err(NluError::Schema { record, .. }) if record == "1"));
        let bad = r#"[{"id":1,"pattern":"a","intent":"smalltalk","slots":{"amount":"0"}}]"#;
        assert!(matches!(PatternTables::from_json(bad, bot), Err(NluError::Schema { .. })));
        let extra = r#"[{"id":1,"pattern":"a","intent":"smalltalk","slots":{},"x":1}]"#;
        assert!(matches!(PatternTables::from_json(extra, bot), Err(NluError::Schema { record, .. }) if record == "#0"));
        let ph = r#"[{"template_id": "f", "intent": "unknown", "missing_slot": null, "text": "{nope}"}]"#;
        let ok_user = r#"[{"id":1,"pattern":"a","intent":"smalltalk","slots":{}}]"#;
        assert!(PatternTables::from_json(ok_user, ph).is_err());
    }

    #[test]
    fn service_keys_conversations_by_session() {
        let (e, k) = engine();
        let svc = NluService::new(e, |_| None);
        let req = |s: &str, u: &str| NluRequest { session_id: s.into(), utterance: u.into(), secret_key: k.to_hex() };
        let r = svc.handle(&req("a", "send 10")).unwrap();
        assert!(!r.complete);
        let r = svc.handle(&req("b", "1123158964")).unwrap();
        assert_eq!(r.intent, Intent::Unknown);
        let r = svc.handle(&req("a", "1123158964")).unwrap();
        assert!(r.complete);
        let bad = NluRequest { secret_key: "00".repeat(32), ..req("a", "yes") };
        assert_eq!(svc.handle(&bad), Err(NluError::Unauthorized));
    }
}
