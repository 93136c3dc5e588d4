import init, { classify_graph, trace_ratio_series, simulate_risk } from "./pkg/netcollapse_web.js";

const $ = (id) => document.getElementById(id);
const out = $("out");
const colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

function show(text, isError = false) {
  out.textContent = text;
  out.className = isError ? "error" : "";
}

function guarded(fn) {
  return () => {
    try {
      fn();
    } catch (e) {
      show(String(e), true);
    }
  };
}

function plot({ rounds, curves }, yLabel) {
  const canvas = $("plot");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = { l: 60, r: 100, t: 20, b: 40 };
  ctx.clearRect(0, 0, w, h);
  const values = Object.values(curves).flat().filter((v) => v !== null && isFinite(v));
  const yMax = Math.max(1, ...values) * 1.05;
  const x = (t) => pad.l + ((t - 1) / Math.max(1, rounds - 1)) * (w - pad.l - pad.r);
  const y = (v) => h - pad.b - (v / yMax) * (h - pad.t - pad.b);

  ctx.strokeStyle = "#000";
  ctx.beginPath();
  ctx.moveTo(pad.l, pad.t);
  ctx.lineTo(pad.l, h - pad.b);
  ctx.lineTo(w - pad.r, h - pad.b);
  ctx.stroke();
  ctx.fillStyle = "#000";
  ctx.font = "12px sans-serif";
  for (let i = 0; i <= 4; i++) {
    const v = (yMax * i) / 4;
    ctx.fillText(v.toPrecision(3), 5, y(v) + 4);
  }
  ctx.fillText("t", w - pad.r + 5, h - pad.b + 4);
  ctx.fillText(yLabel, pad.l + 5, pad.t);
  ctx.fillText("1", x(1) - 3, h - pad.b + 16);
  ctx.fillText(String(rounds), x(rounds) - 8, h - pad.b + 16);

  Object.entries(curves).forEach(([node, ys], i) => {
    const c = colors[i % colors.length];
    ctx.strokeStyle = c;
    ctx.beginPath();
    let started = false;
    ys.forEach((v, k) => {
      if (v === null) return;
      started ? ctx.lineTo(x(k + 1), y(v)) : ctx.moveTo(x(k + 1), y(v));
      started = true;
    });
    ctx.stroke();
    ctx.fillStyle = c;
    ctx.fillText(node, w - pad.r + 10, pad.t + 16 * (i + 1));
  });
}

const graph = () => $("graph").value;
const num = (id) => Number($(id).value);

await init();
show("Ready.");

$("preset").onchange = () => {
  $("graph").value = JSON.stringify({ canonical: $("preset").value });
};

$("classify").onclick = guarded(() => {
  const r = JSON.parse(classify_graph(graph()));
  const lines = Object.entries(r.labels).map(([node, label]) => `${node}: ${label}`);
  show(`unstable seed M_l^inf: {${r.m_l_inf}}\ncollapsing M_l^c: {${r.m_l_c}}\nbounded M_l^nc: {${r.m_l_nc}}\n\n${lines.join("\n")}`);
});

$("limit").onclick = guarded(() => {
  const r = JSON.parse(trace_ratio_series(graph(), num("rounds")));
  plot(r, "Tr Σ / Tr V*");
  show("Limiting trace ratio with equal sample sizes on every edge.");
});

$("simulate").onclick = guarded(() => {
  show("Running…");
  // let the status paint before the (blocking) simulation starts
  setTimeout(guarded(() => {
    const input = {
      graph: JSON.parse(graph()),
      kind: $("kind").value,
      rounds: num("rounds"),
      n_trials: num("trials"),
      n_sample: num("n"),
      d: 3,
      seed: num("seed"),
    };
    const started = performance.now();
    const r = JSON.parse(simulate_risk(JSON.stringify(input)));
    plot(r, "risk ratio");
    const secs = ((performance.now() - started) / 1000).toFixed(1);
    show(`Monte Carlo risk ratio, ${input.n_trials} trials in ${secs}s.${r.note ? " " + r.note : ""}`);
  }), 10);
});
