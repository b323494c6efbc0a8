//! Acceptance gate: one PASS/FAIL line per criterion on stderr.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use hwnode::apps::bench::BenchmarkReport;
use hwnode::apps::workloads::{atan_q6, odd_even_transposition_sort, pack_angles, sobel};
use hwnode::apps::{behavior_by_name, register_builtin_types};
use hwnode::arena::Arena;
use hwnode::config::{Decl, ProjectConfig, SystemOptions};
use hwnode::hwthread::{
    opcode, Behavior, Fabric, FabricOptions, Fault, Mapping, MessageParts, ResourceSpec, RosCalls, ThreadContext,
    ThreadOutcome, ThreadPort, ThreadSpec,
};
use hwnode::middleware::{feedback_topic, Graph, MwError, NodeKind};
use hwnode::msg::text::parse_definitions;
use hwnode::msg::{MsgKind, TypeRegistry};
use hwnode::trace::Event;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const INVARIANCE_INPUTS: usize = 100;
const TRACE_MESSAGES: usize = 1000;
const SOBEL_ORACLE_IMAGES: usize = 20;
const SORT_ORACLE_ARRAYS: usize = 100;
/// Q8.6 least significant bits allowed between CORDIC and `f64::atan`.
const ATAN_TOLERANCE_LSB: i32 = 1;
const SERVICE_CLIENTS: u32 = 4;
const REQUESTS_PER_CLIENT: u32 = 100;
const ACTION_TARGET: u32 = 3;
const PING_PONG_SIZES: &str = "4B,8KiB,1MiB,6MiB";
const PING_PONG_ITERATIONS: usize = 50;
const PING_PONG_BURST: u32 = 50;
/// A median may fall below the previous size's by this fraction plus
/// `MONOTONIC_SLACK_US` before it counts as decreasing.
const MONOTONIC_SLACK_REL: f64 = 0.25;
const MONOTONIC_SLACK_US: f64 = 100.0;
const KEEP_LAST_CASES: u64 = 64;
const JITTER_US: u64 = 20;

fn jittered(seed: u64) -> SystemOptions {
    SystemOptions { trace: false, jitter: Some((seed, JITTER_US)) }
}

// ---------------------------------------------------------------------------
// mapping invariance

fn invariance_topic(
    behavior: &str,
    package: &str,
    ty: &str,
    inputs: impl Fn() -> Vec<Input>,
    expected: usize,
) -> Verdict {
    let cfg = topic_node_cfg(behavior, package, ty, "/in", "/out", INVARIANCE_INPUTS + 28);
    let sw = {
        let sys = start(&cfg, false, &SystemOptions::default());
        drive_topic(&sys, "/in", "/out", &inputs(), expected)
    };
    let hw = {
        let sys = start(&cfg, true, &jittered(7));
        drive_topic(&sys, "/in", "/out", &inputs(), expected)
    };
    ensure!(sw.len() == expected, "{behavior}: {} of {expected} software outputs", sw.len());
    let diff = sw.iter().zip(&hw).filter(|(a, b)| a != b).count();
    ensure!(sw == hw, "{behavior}: {diff} of {expected} outputs differ between mappings");
    Ok(format!("{behavior} {expected}/{INVARIANCE_INPUTS}"))
}

fn sobel_responses(hw: bool, requests: &[(u32, u32, Vec<u8>)]) -> Vec<Vec<u8>> {
    let cfg = sobel_server_cfg(64, 48);
    let sys = start(&cfg, hw, &if hw { jittered(11) } else { SystemOptions::default() });
    let g = sys.graph();
    let node = g.create_node("driver", NodeKind::Software).unwrap();
    let req_ty = ty(g, "application_msgs", MsgKind::SrvRequest, "SobelSrv");
    let resp_ty = ty(g, "application_msgs", MsgKind::SrvResponse, "SobelSrv");
    let client = node.create_service_client("sobelservice", req_ty, resp_ty, POLL).unwrap();
    requests
        .iter()
        .map(|(w, h, data)| {
            let corr = client.send_request(&image_request(g, *w, *h, data)).unwrap();
            g.registry().serialize(&client.take_response(corr, LONG).unwrap()).unwrap()
        })
        .collect()
}

fn mapping_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut notes = Vec::new();

    let payloads: Vec<(u32, Vec<u8>)> = (0..INVARIANCE_INPUTS)
        .map(|i| {
            let n = rng.gen_range(0..4096);
            (i as u32, (0..n).map(|_| rng.gen()).collect())
        })
        .collect();
    notes.push(invariance_topic(
        "copy",
        "bench",
        "Payload",
        || {
            payloads
                .iter()
                .map(|(s, d)| -> Input {
                    let (s, d) = (*s, d.clone());
                    Box::new(move |g| payload_msg(g, s, &d))
                })
                .collect()
        },
        INVARIANCE_INPUTS,
    )?);

    let arrays: Vec<Vec<u32>> = (0..INVARIANCE_INPUTS)
        .map(|_| {
            let n = if rng.gen_bool(0.1) { rng.gen_range(0..4000) } else { 2048 };
            (0..n).map(|_| rng.gen()).collect()
        })
        .collect();
    let valid = arrays.iter().filter(|a| a.len() == 2048).count();
    notes.push(invariance_topic(
        "sort",
        "application_msgs",
        "SortData",
        || {
            arrays
                .iter()
                .map(|a| -> Input {
                    let a = a.clone();
                    Box::new(move |g| sort_msg(g, &a))
                })
                .collect()
        },
        valid,
    )?);

    let limit = 45 * 64;
    let angles: Vec<(i16, i16)> = (0..INVARIANCE_INPUTS)
        .map(|_| {
            let r = if rng.gen_bool(0.15) { i16::MAX as i32 } else { limit };
            (rng.gen_range(-r..=r) as i16, rng.gen_range(-r..=r) as i16)
        })
        .collect();
    let valid = angles.iter().filter(|(x, y)| (*x as i32).abs() <= limit && (*y as i32).abs() <= limit).count();
    notes.push(invariance_topic(
        "inverse_kinematics",
        "std_msgs",
        "UInt32",
        || angles.iter().map(|&(x, y)| -> Input { Box::new(move |g| u32_msg(g, pack_angles(x, y))) }).collect(),
        valid,
    )?);

    let requests: Vec<(u32, u32, Vec<u8>)> = (0..INVARIANCE_INPUTS)
        .map(|_| {
            let (w, h) = if rng.gen_bool(0.1) { (rng.gen_range(1..80), rng.gen_range(1..60)) } else { (64, 48) };
            (w, h, (0..w * h * 3).map(|_| rng.gen()).collect())
        })
        .collect();
    let sw = sobel_responses(false, &requests);
    let hw = sobel_responses(true, &requests);
    let diff = sw.iter().zip(&hw).filter(|(a, b)| a != b).count();
    ensure!(sw.len() == INVARIANCE_INPUTS && sw == hw, "sobel: {diff} of {} responses differ", sw.len());
    notes.push(format!("sobel {INVARIANCE_INPUTS}/{INVARIANCE_INPUTS}"));
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------------------
// subscriber take event order

fn take_event_order() -> Verdict {
    let cfg = topic_node_cfg("copy", "bench", "Payload", "/send", "/recv", 16);
    let sys = start(&cfg, true, &SystemOptions { trace: true, jitter: Some((3, JITTER_US)) });
    let g = sys.graph();
    let thread = sys.thread_id("worker").expect("thread id");
    let node = g.create_node("driver", NodeKind::Software).unwrap();
    let payload = ty(g, "bench", MsgKind::Msg, "Payload");
    let sub = node.create_subscriber("/recv", payload, 16, POLL).unwrap();
    let publ = node.create_publisher("/send", payload).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..TRACE_MESSAGES {
        let data: Vec<u8> = (0..rng.gen_range(0..512)).map(|_| rng.gen()).collect();
        publ.publish(&payload_msg(g, i as u32, &data)).unwrap();
        let echo = sub.take(LONG).map_err(|e| format!("echo {i}: {e}"))?;
        ensure!(g.registry().read_word(&echo, "seq").unwrap() == i as u32, "echo {i} out of order");
    }
    let events = g.trace().take();

    let take = opcode::SUBSCRIBER_TAKE;
    let relevant: Vec<&Event> = events
        .iter()
        .filter(|e| match e {
            Event::ArenaStore { name, .. } => name == "/send",
            Event::OsifCommand { thread: t, .. }
            | Event::DelegateDispatch { thread: t, .. }
            | Event::DelegateUnblock { thread: t, .. }
            | Event::OsifResponse { thread: t, .. }
            | Event::MemRead { thread: t, .. }
            | Event::MemWrite { thread: t, .. } => *t == thread,
        })
        .collect();
    let mut checked = 0;
    let mut violations = Vec::new();
    for (i, e) in relevant.iter().enumerate() {
        if !matches!(e, Event::OsifCommand { opcode, .. } if *opcode == take) {
            continue;
        }
        // the final take is still blocked when the run ends
        let Some(rest) = relevant.get(i + 1..i + 6) else { continue };
        let ok = match rest {
            [Event::DelegateDispatch { opcode: o1, .. }, Event::ArenaStore { addr, .. }, Event::DelegateUnblock { opcode: o2, status: 0, .. }, Event::OsifResponse { words, .. }, Event::MemRead { addr: read, .. }] => {
                *o1 == take && *o2 == take && words.as_slice() == [0, *addr] && read == addr
            }
            _ => false,
        };
        if ok {
            checked += 1;
        } else if violations.len() < 3 {
            violations.push(format!("{rest:?}"));
        }
    }
    ensure!(violations.is_empty(), "ordering violations, first: {}", violations.join(" | "));
    ensure!(checked == TRACE_MESSAGES, "{checked} complete take sequences for {TRACE_MESSAGES} messages");
    Ok(format!("{checked} takes in order"))
}

// ---------------------------------------------------------------------------
// workload oracles

fn atan_oracle_q6(num: f64, den: f64) -> f64 {
    (num / den).atan().to_degrees() * 64.0
}

fn workload_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (640, 480);
    for i in 0..SOBEL_ORACLE_IMAGES {
        let img: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
        ensure!(sobel(w as u32, h as u32, 3, &img) == sobel_oracle(w, h, &img), "sobel image {i} differs");
    }
    for i in 0..SORT_ORACLE_ARRAYS {
        let mut v: Vec<u32> = (0..2048).map(|_| rng.gen_range(0..if i % 2 == 0 { 64 } else { u32::MAX })).collect();
        let mut expected = v.clone();
        expected.sort_unstable();
        odd_even_transposition_sort(&mut v);
        ensure!(v == expected, "sort array {i} differs");
    }
    let mut worst = 0.0f64;
    for deg in -45..=45 {
        // tilt sums spanning the full input range on a one-degree grid
        let num = (deg * 2 * 64) as i64;
        let den = 90 * 64;
        let got = atan_q6(num, den) as f64;
        worst = worst.max((got - atan_oracle_q6(num as f64, den as f64)).abs());
        let ratio = (deg as f64).to_radians().tan();
        let num = (ratio * 4096.0).round() as i64;
        let got = atan_q6(num, 4096) as f64;
        worst = worst.max((got - atan_oracle_q6(num as f64, 4096.0)).abs());
    }
    if worst > ATAN_TOLERANCE_LSB as f64 {
        return Err(format!("atan error {worst:.3} LSB"));
    }
    Ok(format!("sobel {SOBEL_ORACLE_IMAGES}, sort {SORT_ORACLE_ARRAYS}, atan max error {worst:.3} LSB"))
}

// ---------------------------------------------------------------------------
// services and actions

const ECHO_TYPES: &str = "\
test_msgs srv-request Echo { client: u32; value: u32; }
test_msgs srv-response Echo { client: u32; value: u32; }
";

/// Answers each request with the same client tag and `value * 3 + 1`.
struct EchoServer;

impl Behavior for EchoServer {
    fn run(&mut self, port: &mut dyn ThreadPort, ctx: &ThreadContext) -> Result<(), Fault> {
        let srv = ctx.handle("srv")?;
        let msg = ctx.handle("msg")?;
        let (req_client, req_value) = (ctx.offset_of("msg", 0, "client")?, ctx.offset_of("msg", 0, "value")?);
        let (resp_client, resp_value) = (ctx.offset_of("msg", 1, "client")?, ctx.offset_of("msg", 1, "value")?);
        let resp = port.ros_message_address(msg, 1)?;
        loop {
            let req = port.ros_serviceserver_take(srv)?;
            let client = port.read_u32(req + req_client)?;
            let value = port.read_u32(req + req_value)?;
            port.write_u32(resp + resp_client, client)?;
            port.write_u32(resp + resp_value, value.wrapping_mul(3).wrapping_add(1))?;
            port.ros_serviceserver_send_response(srv, resp)?;
        }
    }
}

fn bare_graph(slots: u32) -> (Graph, Fabric) {
    let reg = TypeRegistry::new(8 << 20);
    register_builtin_types(&reg).unwrap();
    reg.register_all(parse_definitions(ECHO_TYPES).unwrap()).unwrap();
    let g = Graph::new(Arc::new(reg), Arc::new(Arena::new(64 << 20).unwrap()));
    let fabric = Fabric::new(g.clone(), FabricOptions { slots, jitter: Some((5, JITTER_US)) });
    (g, fabric)
}

fn concurrent_service_clients() -> Result<(), String> {
    let (g, mut fabric) = bare_graph(1);
    let req = ty(&g, "test_msgs", MsgKind::SrvRequest, "Echo");
    let resp = ty(&g, "test_msgs", MsgKind::SrvResponse, "Echo");
    fabric
        .start(ThreadSpec {
            name: "echo".into(),
            mapping: Mapping::Hardware { slot: 0 },
            resources: vec![
                (
                    "srv".into(),
                    ResourceSpec::ServiceServer { service: "echo".into(), request: req, response: resp, poll: POLL },
                ),
                ("msg".into(), ResourceSpec::Message(MessageParts::Service { request: req, response: resp })),
            ],
            params: BTreeMap::new(),
            behavior: Box::new(EchoServer),
        })
        .map_err(|e| e.to_string())?;
    let results: Vec<(u32, u32)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..SERVICE_CLIENTS)
            .map(|c| {
                let g = g.clone();
                s.spawn(move || {
                    let node = g.create_node(&format!("client_{c}"), NodeKind::Software).unwrap();
                    let client = node.create_service_client("echo", req, resp, POLL).unwrap();
                    let reg = g.registry();
                    let (mut ok, mut mismatched) = (0, 0);
                    for i in 0..REQUESTS_PER_CLIENT {
                        let value = c * 10_000 + i;
                        let m = reg.alloc_with(g.arena(), req, &[]).unwrap();
                        reg.write_word(&m, "client", c).unwrap();
                        reg.write_word(&m, "value", value).unwrap();
                        let corr = client.send_request(&m).unwrap();
                        let r = client.take_response(corr, LONG).unwrap();
                        if reg.read_word(&r, "client").unwrap() == c
                            && reg.read_word(&r, "value").unwrap() == value * 3 + 1
                        {
                            ok += 1;
                        } else {
                            mismatched += 1;
                        }
                    }
                    (ok, mismatched)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let ok: u32 = results.iter().map(|r| r.0).sum();
    let bad: u32 = results.iter().map(|r| r.1).sum();
    fabric.stop_all();
    ensure!(bad == 0, "{bad} correlation mismatches");
    ensure!(ok == SERVICE_CLIENTS * REQUESTS_PER_CLIENT, "{ok} responses");
    Ok(())
}

fn count_action_cfg() -> String {
    r#"
[ResourceGroup@Count]
node = rosnode, "counter"
msg = rosactmsg, example_msgs, action, Count
server = rosacts, node, msg, "count", 10000

[HwThread@counter]
ResourceGroup = Count
Slot = 0
Behavior = count_server
"#
    .into()
}

fn count_action() -> Result<(), String> {
    let sys = start(&count_action_cfg(), true, &jittered(9));
    let g = sys.graph();
    let goal_ty = ty(g, "example_msgs", MsgKind::ActionGoal, "Count");
    let fb_ty = ty(g, "example_msgs", MsgKind::ActionFeedback, "Count");
    let res_ty = ty(g, "example_msgs", MsgKind::ActionResult, "Count");
    let node = g.create_node("driver", NodeKind::Software).unwrap();
    let spy = node.create_subscriber(&feedback_topic("count"), fb_ty, 16, POLL).map_err(|e| e.to_string())?;
    let client = node.create_action_client("count", goal_ty, fb_ty, res_ty, POLL).map_err(|e| e.to_string())?;
    let reg = g.registry();
    let goal = reg.alloc_with(g.arena(), goal_ty, &[]).unwrap();
    reg.write_word(&goal, "target", ACTION_TARGET).unwrap();
    let id = client.send_goal(&goal).map_err(|e| e.to_string())?;
    ensure!(client.wait_accepted(id, LONG) == Ok(true), "goal not accepted");
    for want in 1..=ACTION_TARGET {
        let fb = client.take_feedback(id, LONG).map_err(|e| format!("feedback {want}: {e}"))?;
        ensure!(reg.read_word(&fb, "value").unwrap() == want, "feedback {want} has the wrong value");
    }
    let result = client.take_result(id, LONG).map_err(|e| e.to_string())?;
    let total = reg.read_word(&result, "total").unwrap();
    ensure!(total == (1..=ACTION_TARGET).sum::<u32>(), "result {total}");
    let mut spied = Vec::new();
    while let Ok(m) = spy.take(Some(Duration::from_millis(100))) {
        spied.push(reg.read_word(&m, "value").unwrap());
    }
    ensure!(spied == (1..=ACTION_TARGET).collect::<Vec<_>>(), "feedback topic carried {spied:?}");
    let extra = client.take_feedback(id, Some(Duration::from_millis(50)));
    ensure!(extra.is_err(), "feedback after the result");
    Ok(())
}

fn service_and_action() -> Verdict {
    concurrent_service_clients()?;
    count_action()?;
    Ok(format!(
        "{} responses from {SERVICE_CLIENTS} clients, {ACTION_TARGET} feedback then result",
        SERVICE_CLIENTS * REQUESTS_PER_CLIENT
    ))
}

// ---------------------------------------------------------------------------
// two-process ping-pong

struct Child(std::process::Child);

impl Drop for Child {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn ping_pong_configs(board: u16, pc: u16) -> (String, String) {
    let board_cfg = format!(
        r#"
[General]
Slots = 1

[Transport]
Bind = 127.0.0.1:{board}

[ResourceGroup@Copy]
node = rosnode, "copy"
msg = rosmsg, bench, msg, Payload
sub = rossub, node, msg, "/send", 10000
pub = rospub, node, msg, "/recv"

[HwThread@copy]
ResourceGroup = Copy
Slot = 0
Behavior = copy
QueueDepth = 64
"#
    );
    let pc_cfg = format!(
        r#"
[Transport]
Bind = 127.0.0.1:{pc}
Peers = 127.0.0.1:{board}

[Benchmark]
TimeoutMs = 20000
"#
    );
    (board_cfg, pc_cfg)
}

fn distributed_ping_pong() -> Verdict {
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("pingpong-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let (board_cfg, pc_cfg) = ping_pong_configs(free_port(), free_port());
    let (board_path, pc_path) = (dir.join("board.cfg"), dir.join("pc.cfg"));
    std::fs::write(&board_path, board_cfg).map_err(|e| e.to_string())?;
    std::fs::write(&pc_path, pc_cfg).map_err(|e| e.to_string())?;

    let exe = env!("CARGO_BIN_EXE_hwnode");
    let _board = Child(
        Command::new(exe)
            .args(["run", board_path.to_str().unwrap(), "--duration", "170"])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?,
    );
    let out = Command::new(exe)
        .args(["bench", pc_path.to_str().unwrap(), "--json", "--sizes", PING_PONG_SIZES])
        .args(["--iters", &PING_PONG_ITERATIONS.to_string(), "--burst", &PING_PONG_BURST.to_string()])
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure!(out.status.success(), "bench exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim());
    let report: BenchmarkReport = serde_json::from_str(&stdout).map_err(|e| format!("report: {e}"))?;
    ensure!(report.rows.len() == 4, "{} size rows", report.rows.len());
    for r in &report.rows {
        ensure!(r.complete && r.error.is_none(), "size {}: incomplete or corrupted", r.size);
        ensure!(r.samples_us.len() == PING_PONG_ITERATIONS, "size {}: {} samples", r.size, r.samples_us.len());
    }
    let burst = report.burst.as_ref().ok_or("no burst result")?;
    ensure!(burst.sent == PING_PONG_BURST && burst.received == burst.sent && burst.in_order, "burst {burst:?}");
    ensure!(
        report.medians_nondecreasing(MONOTONIC_SLACK_REL, MONOTONIC_SLACK_US),
        "medians decrease: {:?}",
        report.rows.iter().map(|r| r.median_us).collect::<Vec<_>>()
    );
    let _ = writeln!(std::io::stderr(), "{report}");
    let medians: Vec<String> = report.rows.iter().map(|r| format!("{:.0}", r.median_us.unwrap_or(f64::NAN))).collect();
    Ok(format!("medians [us] {}", medians.join(" / ")))
}

// ---------------------------------------------------------------------------
// configuration golden

const SOBEL_DIP_GROUPS: &str = r#"[ResourceGroup(at)ResourceGroupSobel]
node_3 = rosnode, "Sobel"
filter_service_msg = rossrvmsg, application_msgs, srv, SobelSrv
filter_server = rossrvs, node_3, filter_service_msg, "sobelservice", 10000

[ResourceGroup(at)ResourceGroupDIP]
node_2 = rosnode, "DIP"
filter_service_msg = rossrvmsg, application_msgs, srv, SobelSrv
filter_client = rossrvc, node_2, filter_service_msg, "sobelservice", 10000
image_msg = rosmsg, sensor_msgs, msg, Image
sub = rossub, node_2, image_msg, "/image_raw", 10000
pub = rospub, node_2, image_msg, "/image_filtered"
"#;

fn s(v: &str) -> String {
    v.into()
}

fn expected_sobel_dip_groups() -> Vec<(String, Vec<(String, Decl)>)> {
    let srv_msg = || Decl::SrvMsg { package: s("application_msgs"), ty: s("SobelSrv") };
    vec![
        (
            s("ResourceGroupSobel"),
            vec![
                (s("node_3"), Decl::Node { label: s("Sobel") }),
                (s("filter_service_msg"), srv_msg()),
                (
                    s("filter_server"),
                    Decl::SrvServer {
                        node: s("node_3"),
                        msg: s("filter_service_msg"),
                        service: s("sobelservice"),
                        poll_us: 10000,
                    },
                ),
            ],
        ),
        (
            s("ResourceGroupDIP"),
            vec![
                (s("node_2"), Decl::Node { label: s("DIP") }),
                (s("filter_service_msg"), srv_msg()),
                (
                    s("filter_client"),
                    Decl::SrvClient {
                        node: s("node_2"),
                        msg: s("filter_service_msg"),
                        service: s("sobelservice"),
                        poll_us: 10000,
                    },
                ),
                (s("image_msg"), Decl::Msg { package: s("sensor_msgs"), ty: s("Image") }),
                (
                    s("sub"),
                    Decl::Sub { node: s("node_2"), msg: s("image_msg"), topic: s("/image_raw"), poll_us: 10000 },
                ),
                (s("pub"), Decl::Pub { node: s("node_2"), msg: s("image_msg"), topic: s("/image_filtered") }),
            ],
        ),
    ]
}

fn config_golden() -> Verdict {
    let cfg = ProjectConfig::parse(SOBEL_DIP_GROUPS).map_err(|e| e.to_string())?;
    let got: Vec<(String, Vec<(String, Decl)>)> = cfg
        .groups
        .iter()
        .map(|g| (g.name.clone(), g.decls.iter().map(|d| (d.name.clone(), d.decl.clone())).collect()))
        .collect();
    ensure!(got == expected_sobel_dip_groups(), "object graph differs: {got:#?}");
    let non_node: usize = cfg.groups.iter().map(|g| g.objects().count()).sum();
    ensure!(non_node == 7, "{non_node} non-node declarations");
    let polls: Vec<u32> = cfg.groups.iter().flat_map(|g| g.decls.iter().filter_map(|d| d.decl.poll_us())).collect();
    ensure!(polls == [10000, 10000, 10000], "polling periods {polls:?}");
    let rendered = cfg.render();
    let again = ProjectConfig::parse(&rendered).map_err(|e| format!("rendered text: {e}"))?;
    ensure!(again == cfg, "round trip changed the configuration");
    ensure!(again.render() == rendered, "render is not a fixed point");
    Ok(format!("2 groups, {non_node} declarations plus 2 nodes, round trip stable"))
}

// ---------------------------------------------------------------------------
// keep-last queues and protocol faults

/// Keep-last model: the queue always holds the contiguous run `lo..hi`.
struct IntervalOracle {
    depth: u32,
    lo: u32,
    hi: u32,
}

impl IntervalOracle {
    fn publish(&mut self) {
        self.hi += 1;
        self.lo = self.lo.max(self.hi.saturating_sub(self.depth));
    }

    fn take(&mut self) -> Option<u32> {
        (self.lo < self.hi).then(|| {
            self.lo += 1;
            self.lo - 1
        })
    }
}

fn keep_last_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(1..=8);
    let (g, _fabric) = bare_graph(0);
    let u32_ty = ty(&g, "std_msgs", MsgKind::Msg, "UInt32");
    let node = g.create_node("queue", NodeKind::Software).unwrap();
    let sub = node.create_subscriber("/q", u32_ty, depth as usize, POLL).unwrap();
    let publ = node.create_publisher("/q", u32_ty).unwrap();
    let mut oracle = IntervalOracle { depth, lo: 0, hi: 0 };
    let mut taken = 0u64;
    for step in 0..rng.gen_range(1..200) {
        if rng.gen_bool(0.6) {
            publ.publish(&u32_msg(&g, oracle.hi)).unwrap();
            oracle.publish();
        } else {
            let got = match sub.take(Some(Duration::ZERO)) {
                Ok(m) => Some(g.registry().read_word(&m, "data").unwrap()),
                Err(MwError::Timeout) => None,
                Err(e) => return Err(format!("seed {seed} step {step}: {e}")),
            };
            let want = oracle.take();
            ensure!(got == want, "seed {seed} depth {depth} step {step}: took {got:?}, oracle {want:?}");
            taken += want.is_some() as u64;
        }
        ensure!(sub.queued() == (oracle.hi - oracle.lo) as usize, "seed {seed} step {step}: queue length");
    }
    let dropped = oracle.hi as u64 - taken - (oracle.hi - oracle.lo) as u64;
    ensure!(sub.dropped() == dropped, "seed {seed}: dropped {} vs oracle {dropped}", sub.dropped());
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Rogue {
    DoubleEmit,
    AwaitWithoutCommand,
    WrongLength,
    EmptyFrame,
    SwallowedViolation,
}

impl Behavior for Rogue {
    fn run(&mut self, port: &mut dyn ThreadPort, ctx: &ThreadContext) -> Result<(), Fault> {
        let sub = ctx.handle("sub")?;
        let take = opcode::SUBSCRIBER_TAKE;
        match self {
            Rogue::DoubleEmit => {
                port.emit(&[take, sub])?;
                port.emit(&[take, sub])
            }
            Rogue::AwaitWithoutCommand => port.await_response().map(drop),
            Rogue::WrongLength => port.emit(&[take, sub, 0]),
            Rogue::EmptyFrame => port.emit(&[]),
            Rogue::SwallowedViolation => {
                port.emit(&[take, sub])?;
                let _ = port.emit(&[take, sub]);
                Ok(())
            }
        }
    }
}

fn protocol_faults() -> Result<usize, String> {
    let rogues = [
        Rogue::DoubleEmit,
        Rogue::AwaitWithoutCommand,
        Rogue::WrongLength,
        Rogue::EmptyFrame,
        Rogue::SwallowedViolation,
    ];
    let (g, mut fabric) = bare_graph(rogues.len() as u32 + 1);
    let u32_ty = ty(&g, "std_msgs", MsgKind::Msg, "UInt32");
    let payload = ty(&g, "bench", MsgKind::Msg, "Payload");
    let mut checked = 0;
    for hw in [false, true] {
        let mut ids = Vec::new();
        for (slot, r) in rogues.iter().enumerate() {
            let id = fabric
                .start(ThreadSpec {
                    name: format!("rogue_{r:?}_{hw}"),
                    mapping: if hw { Mapping::Hardware { slot: slot as u32 } } else { Mapping::Software },
                    resources: vec![(
                        "sub".into(),
                        ResourceSpec::Subscriber { topic: "/rogue".into(), ty: u32_ty, depth: 4, poll: POLL },
                    )],
                    params: BTreeMap::new(),
                    behavior: Box::new(*r),
                })
                .map_err(|e| e.to_string())?;
            ids.push((id, *r));
        }
        for (id, r) in &ids {
            let done = eventually(Duration::from_secs(10), || fabric.outcome(*id) != Some(ThreadOutcome::Running));
            ensure!(done, "{r:?} (hw {hw}) still running");
            let outcome = fabric.stop(*id);
            ensure!(
                matches!(outcome, Some(ThreadOutcome::Faulted(Fault::ProtocolViolation(_)))),
                "{r:?} (hw {hw}) ended with {outcome:?}"
            );
            checked += 1;
        }
    }

    let mut params = BTreeMap::new();
    params.insert("Capacity".to_string(), "1024".to_string());
    fabric
        .start(ThreadSpec {
            name: "healthy".into(),
            mapping: Mapping::Hardware { slot: rogues.len() as u32 },
            resources: vec![
                ("sub".into(), ResourceSpec::Subscriber { topic: "/in".into(), ty: payload, depth: 4, poll: POLL }),
                ("pub".into(), ResourceSpec::Publisher { topic: "/out".into(), ty: payload }),
                ("msg".into(), ResourceSpec::Message(MessageParts::Msg(payload))),
            ],
            params,
            behavior: behavior_by_name("copy").unwrap(),
        })
        .map_err(|e| e.to_string())?;
    let node = g.create_node("driver", NodeKind::Software).unwrap();
    let sub = node.create_subscriber("/out", payload, 4, POLL).unwrap();
    node.create_publisher("/in", payload).unwrap().publish(&payload_msg(&g, 42, b"still alive")).unwrap();
    let echo = sub.take(LONG).map_err(|e| format!("healthy thread: {e}"))?;
    ensure!(g.registry().read_sequence(&echo, "data").unwrap() == b"still alive", "healthy thread echoed garbage");
    let outcomes = fabric.stop_all();
    ensure!(outcomes.iter().all(|(_, o)| *o == ThreadOutcome::Finished), "healthy thread ended with {outcomes:?}");
    Ok(checked)
}

fn queues_and_faults() -> Verdict {
    for seed in 0..KEEP_LAST_CASES {
        keep_last_case(seed)?;
    }
    let rogues = protocol_faults()?;
    Ok(format!("{KEEP_LAST_CASES} keep-last sequences, {rogues} violating threads faulted"))
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let criteria: [Criterion; 7] = [
        ("mapping invariance", mapping_invariance),
        ("subscriber take event order", take_event_order),
        ("workload oracles", workload_oracles),
        ("service and action semantics", service_and_action),
        ("distributed ping-pong", distributed_ping_pong),
        ("configuration golden", config_golden),
        ("keep-last queues and protocol faults", queues_and_faults),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        let line = match &verdict {
            Ok(detail) => format!("PASS {name}: {detail} ({secs:.1}s)"),
            Err(why) => {
                failed.push(name);
                format!("FAIL {name}: {why} ({secs:.1}s)")
            }
        };
        let _ = writeln!(std::io::stderr(), "{line}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
