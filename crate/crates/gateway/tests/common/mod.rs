//! A running gateway on an ephemeral port and a scripted client for it.
#![allow(dead_code)]

use std::sync::Arc;

use bonik_core::crypto::PublicKey;
use bonik_core::gateway::{
    client, ChatReply, Dapp, GatewayConfig, LoginGrant, MessageKind, ProtocolMessage, RegistrationResponse,
    SystemClock,
};
use bonik_core::network::{BatchPolicy, LatencyProfile, NetworkConfig};
use bonik_gateway::GatewayKey;
use serde_json::Value;

pub fn fast_config() -> GatewayConfig {
    GatewayConfig {
        network: NetworkConfig {
            batch: BatchPolicy { batch_timeout_ms: 2, max_message_count: 500 },
            latency: LatencyProfile::instant(),
            ..NetworkConfig::default()
        },
        ..GatewayConfig::default()
    }
}

pub struct Server {
    pub base: String,
    pub dapp: Arc<Dapp>,
    pub http: reqwest::Client,
    pub gateway_key: PublicKey,
}

pub struct User {
    pub name: String,
    pub keys: RegistrationResponse,
    pub grant: LoginGrant,
}

#[derive(Debug)]
pub struct Reply {
    pub status: u16,
    pub body: Value,
}

impl Reply {
    pub fn message(&self) -> ProtocolMessage {
        serde_json::from_value(self.body.clone()).unwrap_or_else(|e| panic!("{e}: {}", self.body))
    }

    pub fn code(&self) -> &str {
        self.body["code"].as_str().unwrap_or("")
    }
}

impl Server {
    pub async fn start(cfg: GatewayConfig) -> Server {
        let dapp = Arc::new(Dapp::open(&cfg, Arc::new(SystemClock)).expect("gateway"));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        tokio::spawn(bonik_gateway::serve(listener, Arc::clone(&dapp), std::future::pending()));
        let http = reqwest::Client::new();
        let key: GatewayKey = http.get(format!("{base}/api/gateway-key")).send().await.unwrap().json().await.unwrap();
        assert_eq!(key.public_key, *dapp.gateway_public_key());
        Server { base, dapp, http, gateway_key: key.public_key }
    }

    pub fn now(&self) -> u64 {
        self.dapp.now_ms()
    }

    pub async fn post(&self, path: &str, body: &impl serde::Serialize) -> Reply {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await.unwrap();
        Reply { status: resp.status().as_u16(), body: resp.json().await.unwrap_or(Value::Null) }
    }

    pub async fn post_raw(&self, path: &str, body: &'static str) -> Reply {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        Reply { status: resp.status().as_u16(), body: resp.json().await.unwrap_or(Value::Null) }
    }

    pub async fn get(&self, path: &str, session: Option<&str>) -> Reply {
        let mut req = self.http.get(format!("{}{path}", self.base));
        if let Some(s) = session {
            req = req.bearer_auth(s);
        }
        let resp = req.send().await.unwrap();
        Reply { status: resp.status().as_u16(), body: resp.json().await.unwrap_or(Value::Null) }
    }

    pub async fn register(&self, name: &str, pw: &str) -> RegistrationResponse {
        let m1 = client::registration_m1(&self.gateway_key, name, pw, self.now()).unwrap();
        let r = self.post("/api/register", &m1).await;
        assert_eq!(r.status, 200, "{}", r.body);
        client::verify_m4(&r.message(), &self.gateway_key, &m1.nonce).unwrap()
    }

    pub async fn login(&self, keys: &RegistrationResponse, name: &str, pw: &str) -> Result<LoginGrant, Reply> {
        let msg = client::login_message(&self.gateway_key, &keys.private_key, name, pw, self.now()).unwrap();
        let r = self.post("/api/login", &msg).await;
        if r.status != 200 {
            return Err(r);
        }
        Ok(client::open_reply(&r.message(), &self.gateway_key, MessageKind::LoginResp, &msg.nonce).unwrap())
    }

    pub async fn onboard(&self, name: &str) -> User {
        let keys = self.register(name, "pw").await;
        let grant = self.login(&keys, name, "pw").await.unwrap_or_else(|r| panic!("{}", r.body));
        User { name: name.into(), keys, grant }
    }

    pub async fn chat(&self, user: &User, text: &str) -> Result<ChatReply, Reply> {
        let msg = client::chat_message(&user.keys.private_key, &user.grant.session_id, text, self.now());
        let r = self.post("/api/chat", &msg).await;
        if r.status != 200 {
            return Err(r);
        }
        Ok(client::open_reply(&r.message(), &self.gateway_key, MessageKind::ChatResp, &msg.nonce).unwrap())
    }
}
