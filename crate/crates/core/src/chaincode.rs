//! System chaincode (registration, login) and bank chaincode (balance query,
//! transfer), executed against a key-value state view.
//!
//! World-state layout:
//!
//! | key                 | value                                   |
//! |---------------------|-----------------------------------------|
//! | `user:<userName>`   | hex SHA-256 of the password             |
//! | `acct:<userName>`   | the user's 10-digit account number      |
//! | `bal:<accountNum>`  | balance, decimal string of whole units  |
//! | `meta:next_account` | next account number to hand out         |
//!
//! Transfers keep the strict `fromBalance > amount` check: moving an
//! account's entire balance aborts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::crypto::MessageDigest;

/// Balance every account starts with.
pub const INITIAL_BALANCE: u64 = 10_000;
/// First account number handed out.
pub const FIRST_ACCOUNT: u64 = 1_000_000_001;

const USER_PREFIX: &str = "user:";
const ACCT_PREFIX: &str = "acct:";
const BAL_PREFIX: &str = "bal:";
const NEXT_ACCOUNT_KEY: &str = "meta:next_account";

pub fn user_key(user_name: &str) -> String {
    format!("{USER_PREFIX}{user_name}")
}

pub fn account_key(user_name: &str) -> String {
    format!("{ACCT_PREFIX}{user_name}")
}

pub fn balance_key(account: &AccountNumber) -> String {
    format!("{BAL_PREFIX}{account}")
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("state keys must be non-empty")]
    InvalidKey,
}

/// Read/write view of the world state used by chaincode.
pub trait StateAccess {
    fn get_state(&self, key: &str) -> Option<String>;
    fn put_state(&mut self, key: &str, value: String) -> Result<(), StateError>;
}

/// Ten decimal digits.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AccountNumber(String);

impl AccountNumber {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn from_sequence(n: u64) -> Option<AccountNumber> {
        (n <= 9_999_999_999).then(|| AccountNumber(format!("{n:010}")))
    }

    pub fn is_valid(s: &str) -> bool {
        s.len() == 10 && s.bytes().all(|b| b.is_ascii_digit())
    }
}

impl fmt::Display for AccountNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for AccountNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccountNumber({})", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("account numbers are exactly ten decimal digits, got {0:?}")]
pub struct InvalidAccountNumber(pub String);

impl FromStr for AccountNumber {
    type Err = InvalidAccountNumber;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if AccountNumber::is_valid(s) {
            Ok(AccountNumber(s.to_owned()))
        } else {
            Err(InvalidAccountNumber(s.to_owned()))
        }
    }
}

impl Serialize for AccountNumber {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for AccountNumber {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// `⟨userName, h⟩`, shared by registration and login.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Credentials {
    #[serde(rename = "userName")]
    pub user_name: String,
    pub h: MessageDigest,
}

pub type RegisData = Credentials;
pub type LoginData = Credentials;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalData {
    #[serde(rename = "userName")]
    pub user_name: String,
    #[serde(rename = "accountNum")]
    pub account_num: AccountNumber,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferData {
    #[serde(rename = "userName")]
    pub user_name: String,
    #[serde(rename = "fromAcc")]
    pub from_acc: AccountNumber,
    #[serde(rename = "toAcc")]
    pub to_acc: AccountNumber,
    pub amount: u64,
}

/// `req ≜ ⟨type, data⟩`; the variant tag is the request type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", deny_unknown_fields)]
pub enum Request {
    #[serde(rename = "registration")]
    Registration(RegisData),
    #[serde(rename = "login")]
    Login(LoginData),
    #[serde(rename = "balQuery")]
    BalQuery(BalData),
    #[serde(rename = "transfer")]
    Transfer(TransferData),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RequestError {
    #[error("userName must be non-empty")]
    EmptyUserName,
    #[error("userName may not contain control characters")]
    BadUserName,
    #[error("transfer amount must be at least 1")]
    ZeroAmount,
    #[error("fromAcc and toAcc must differ")]
    SelfTransfer,
}

impl Request {
    pub fn type_name(&self) -> &'static str {
        match self {
            Request::Registration(_) => "registration",
            Request::Login(_) => "login",
            Request::BalQuery(_) => "balQuery",
            Request::Transfer(_) => "transfer",
        }
    }

    pub fn user_name(&self) -> &str {
        match self {
            Request::Registration(d) | Request::Login(d) => &d.user_name,
            Request::BalQuery(d) => &d.user_name,
            Request::Transfer(d) => &d.user_name,
        }
    }

    pub fn is_read_only(&self) -> bool {
        matches!(self, Request::BalQuery(_))
    }

    pub fn validate(&self) -> Result<(), RequestError> {
        let name = self.user_name();
        if name.trim().is_empty() {
            return Err(RequestError::EmptyUserName);
        }
        if name.chars().any(char::is_control) {
            return Err(RequestError::BadUserName);
        }
        if let Request::Transfer(t) = self {
            if t.amount == 0 {
                return Err(RequestError::ZeroAmount);
            }
            if t.from_acc == t.to_acc {
                return Err(RequestError::SelfTransfer);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    MalformedRequest,
    RegistrationRejected,
    AccountNotFound,
    UnsupportedType,
    InvalidKey,
    CorruptState,
    AccountSpaceExhausted,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::MalformedRequest => "MALFORMED_REQUEST",
            ErrorCode::RegistrationRejected => "REGISTRATION_REJECTED",
            ErrorCode::AccountNotFound => "ACCOUNT_NOT_FOUND",
            ErrorCode::UnsupportedType => "UNSUPPORTED_TYPE",
            ErrorCode::InvalidKey => "INVALID_KEY",
            ErrorCode::CorruptState => "CORRUPT_STATE",
            ErrorCode::AccountSpaceExhausted => "ACCOUNT_SPACE_EXHAUSTED",
        }
    }

    fn parse(s: &str) -> Option<ErrorCode> {
        Some(match s {
            "MALFORMED_REQUEST" => ErrorCode::MalformedRequest,
            "REGISTRATION_REJECTED" => ErrorCode::RegistrationRejected,
            "ACCOUNT_NOT_FOUND" => ErrorCode::AccountNotFound,
            "UNSUPPORTED_TYPE" => ErrorCode::UnsupportedType,
            "INVALID_KEY" => ErrorCode::InvalidKey,
            "CORRUPT_STATE" => ErrorCode::CorruptState,
            "ACCOUNT_SPACE_EXHAUSTED" => ErrorCode::AccountSpaceExhausted,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Status {
    True,
    False,
    TransactionSuccessful,
    TransactionAborted,
    Balance(u64),
    Error(ErrorCode),
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::True => f.write_str("TRUE"),
            Status::False => f.write_str("FALSE"),
            Status::TransactionSuccessful => f.write_str("TRANSACTION SUCCESSFUL"),
            Status::TransactionAborted => f.write_str("TRANSACTION ABORTED"),
            Status::Balance(v) => write!(f, "BALANCE {v}"),
            Status::Error(c) => write!(f, "ERROR {}", c.as_str()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Response {
    pub status: Status,
    pub detail: Option<String>,
}

impl Response {
    pub fn new(status: Status) -> Response {
        Response { status, detail: None }
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Response {
        Response { status: Status::Error(code), detail: Some(detail.into()) }
    }

    pub fn is_error(&self) -> bool {
        matches!(self.status, Status::Error(_))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseWire {
    status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    balance: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detail: Option<String>,
}

impl Serialize for Response {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let (status, balance, code) = match self.status {
            Status::Balance(v) => ("BALANCE".to_owned(), Some(v), None),
            Status::Error(c) => ("ERROR".to_owned(), None, Some(c.as_str().to_owned())),
            other => (other.to_string(), None, None),
        };
        ResponseWire { status, balance, code, detail: self.detail.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Response {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let w = ResponseWire::deserialize(d)?;
        let status = match (w.status.as_str(), w.balance, w.code.as_deref()) {
            ("TRUE", None, None) => Status::True,
            ("FALSE", None, None) => Status::False,
            ("TRANSACTION SUCCESSFUL", None, None) => Status::TransactionSuccessful,
            ("TRANSACTION ABORTED", None, None) => Status::TransactionAborted,
            ("BALANCE", Some(v), None) => Status::Balance(v),
            ("ERROR", None, Some(c)) => {
                Status::Error(ErrorCode::parse(c).ok_or_else(|| D::Error::custom("unknown error code"))?)
            }
            _ => return Err(D::Error::custom(format!("invalid response status {:?}", w.status))),
        };
        Ok(Response { status, detail: w.detail })
    }
}

impl From<StateError> for Response {
    fn from(e: StateError) -> Response {
        Response::error(ErrorCode::InvalidKey, e.to_string())
    }
}

/// System chaincode entry point: login and registration are handled here,
/// everything else is forwarded to the bank chaincode.
pub fn scc_invoke(state: &mut impl StateAccess, request: &Request) -> Response {
    if let Err(e) = request.validate() {
        return Response::error(ErrorCode::MalformedRequest, e.to_string());
    }
    match request {
        Request::Login(data) => login_func(state, data),
        Request::Registration(data) => reg_func(state, data),
        _ => bcc_invoke(state, request),
    }
}

/// Stores the credential digest and provisions an account holding
/// [`INITIAL_BALANCE`]. Duplicate user names are rejected.
pub fn reg_func(state: &mut impl StateAccess, data: &RegisData) -> Response {
    let ukey = user_key(&data.user_name);
    if state.get_state(&ukey).is_some() {
        return Response::error(
            ErrorCode::RegistrationRejected,
            format!("user {:?} is already registered", data.user_name),
        );
    }
    let seq = match state.get_state(NEXT_ACCOUNT_KEY) {
        None => FIRST_ACCOUNT,
        Some(v) => match v.parse::<u64>() {
            Ok(n) => n,
            Err(_) => return Response::error(ErrorCode::CorruptState, "account counter"),
        },
    };
    let Some(account) = AccountNumber::from_sequence(seq) else {
        return Response::error(ErrorCode::AccountSpaceExhausted, "no account numbers left");
    };
    let writes = [
        (ukey, data.h.to_hex()),
        (account_key(&data.user_name), account.to_string()),
        (balance_key(&account), INITIAL_BALANCE.to_string()),
        (NEXT_ACCOUNT_KEY.to_owned(), (seq + 1).to_string()),
    ];
    for (k, v) in writes {
        if let Err(e) = state.put_state(&k, v) {
            return e.into();
        }
    }
    Response::new(Status::True)
}

pub fn login_func(state: &impl StateAccess, data: &LoginData) -> Response {
    match state.get_state(&user_key(&data.user_name)) {
        Some(stored) if stored == data.h.to_hex() => Response::new(Status::True),
        _ => Response::new(Status::False),
    }
}

/// Bank chaincode entry point.
pub fn bcc_invoke(state: &mut impl StateAccess, request: &Request) -> Response {
    match request {
        Request::BalQuery(data) => bal_q_func(state, data),
        Request::Transfer(data) => trans_func(state, data),
        other => Response::error(
            ErrorCode::UnsupportedType,
            format!("bank chaincode does not handle {}", other.type_name()),
        ),
    }
}

fn read_balance(state: &impl StateAccess, account: &AccountNumber) -> Result<u64, Response> {
    let raw = state.get_state(&balance_key(account)).ok_or_else(|| {
        Response::error(ErrorCode::AccountNotFound, format!("account {account} not found"))
    })?;
    raw.parse::<u64>()
        .map_err(|_| Response::error(ErrorCode::CorruptState, format!("balance of {account}")))
}

pub fn bal_q_func(state: &impl StateAccess, data: &BalData) -> Response {
    match read_balance(state, &data.account_num) {
        Ok(v) => Response::new(Status::Balance(v)),
        Err(resp) => resp,
    }
}

pub fn trans_func(state: &mut impl StateAccess, data: &TransferData) -> Response {
    if data.from_acc == data.to_acc {
        return Response::error(ErrorCode::MalformedRequest, RequestError::SelfTransfer.to_string());
    }
    let from_balance = match read_balance(state, &data.from_acc) {
        Ok(v) => v,
        Err(resp) => return resp,
    };
    let to_balance = match read_balance(state, &data.to_acc) {
        Ok(v) => v,
        Err(resp) => return resp,
    };
    if from_balance > data.amount {
        let Some(credited) = to_balance.checked_add(data.amount) else {
            return Response::new(Status::TransactionAborted);
        };
        let debited = from_balance - data.amount;
        for (acct, v) in [(&data.from_acc, debited), (&data.to_acc, credited)] {
            if let Err(e) = state.put_state(&balance_key(acct), v.to_string()) {
                return e.into();
            }
        }
        Response::new(Status::TransactionSuccessful)
    } else {
        Response::new(Status::TransactionAborted)
    }
}

/// Plain in-memory state, handy for tests and off-ledger simulation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryState(pub std::collections::BTreeMap<String, String>);

impl StateAccess for MemoryState {
    fn get_state(&self, key: &str) -> Option<String> {
        self.0.get(key).cloned()
    }

    fn put_state(&mut self, key: &str, value: String) -> Result<(), StateError> {
        if key.is_empty() {
            return Err(StateError::InvalidKey);
        }
        self.0.insert(key.to_owned(), value);
        Ok(())
    }
}
