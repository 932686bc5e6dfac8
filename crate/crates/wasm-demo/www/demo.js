import init, { opinion_json, population_json, variance_json } from "./pkg/rbm_wasm.js";

const COLORS = ["#1f77b4", "#d62728", "#2ca02c"];
const $ = (id) => document.getElementById(id);

function axes(ctx, w, h, pad) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, pad / 2);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad / 2, h - pad);
  ctx.stroke();
}

function scaler(lo, hi, a, b) {
  const span = hi - lo || 1;
  return (v) => a + ((v - lo) / span) * (b - a);
}

function label(ctx, text, x, y) {
  ctx.fillStyle = "#444";
  ctx.font = "12px sans-serif";
  ctx.fillText(text, x, y);
}

function runOpinion() {
  const c = $("ocanvas"), ctx = c.getContext("2d"), pad = 36;
  const r = JSON.parse(opinion_json(+$("d23").value, +$("workers").value, 1e-3, +$("oseed").value));
  const all = r.species.flat(2);
  const lo = Math.min(...all), hi = Math.max(...all);
  const tmax = r.times[r.times.length - 1];
  const sx = scaler(0, tmax, pad, c.width - pad / 2), sy = scaler(lo, hi, c.height - pad, pad / 2);
  axes(ctx, c.width, c.height, pad);
  r.species.forEach((snaps, i) => {
    ctx.fillStyle = COLORS[i];
    const size = i === 0 ? 1.5 : 4;
    snaps.forEach((xs, s) => xs.forEach((x) => ctx.fillRect(sx(r.times[s]) - size / 2, sy(x) - size / 2, size, size)));
  });
  label(ctx, "time", c.width - 40, c.height - 10);
  label(ctx, "opinion", 4, 14);
  $("oout").textContent = `final spread ${r.final_spread.toFixed(3)}, worker clusters ${r.worker_clusters} (workers blue, managers red, CEOs green)`;
}

function runPopulation() {
  const c = $("pcanvas"), ctx = c.getContext("2d"), pad = 36;
  const r = JSON.parse(population_json(+$("pn").value, +$("preps").value, +$("pseed").value));
  const top = Math.max(...r.density.flat());
  const w = r.centers[1] - r.centers[0];
  const sx = scaler(r.centers[0] - w / 2, r.centers[r.centers.length - 1] + w / 2, pad, c.width - pad / 2);
  const sy = scaler(0, top, c.height - pad, pad / 2);
  axes(ctx, c.width, c.height, pad);
  r.density.forEach((d, i) => {
    ctx.strokeStyle = COLORS[i];
    ctx.lineWidth = 2;
    ctx.beginPath();
    d.forEach((v, b) => {
      const x0 = sx(r.centers[b] - w / 2), x1 = sx(r.centers[b] + w / 2);
      if (b === 0) ctx.moveTo(x0, sy(v)); else ctx.lineTo(x0, sy(v));
      ctx.lineTo(x1, sy(v));
    });
    ctx.stroke();
  });
  ctx.lineWidth = 1;
  label(ctx, "x", c.width - 20, c.height - 10);
  $("pout").textContent = "overlap (1,2) " + r.overlaps[0].toFixed(3) + ", (1,3) " + r.overlaps[1].toFixed(3) + ", (2,3) " + r.overlaps[2].toFixed(3);
}

function runVariance() {
  const c = $("vcanvas"), ctx = c.getContext("2d"), pad = 36;
  const pts = JSON.parse(variance_json(+$("n1").value, +$("n2").value, 1));
  const lx = pts.map((p) => Math.log(p.batch_size)), ly = pts.map((p) => Math.log(p.mean_variance));
  const sx = scaler(Math.min(...lx), Math.max(...lx), pad, c.width - pad), sy = scaler(Math.min(...ly), Math.max(...ly), c.height - pad, pad / 2);
  axes(ctx, c.width, c.height, pad);
  ctx.strokeStyle = COLORS[0];
  ctx.fillStyle = COLORS[0];
  ctx.beginPath();
  pts.forEach((p, k) => {
    const x = sx(lx[k]), y = sy(ly[k]);
    if (k === 0) ctx.moveTo(x, y); else ctx.lineTo(x, y);
    ctx.fillRect(x - 3, y - 3, 6, 6);
    label(ctx, "p=" + p.batch_size, x + 4, y - 6);
  });
  ctx.stroke();
  label(ctx, "log p", c.width - 40, c.height - 10);
  label(ctx, "log E|chi|^2", 4, 14);
  $("vout").textContent = pts.map((p) => `p=${p.batch_size}: ${p.mean_variance.toExponential(3)} (theta ${p.theta})`).join("; ");
}

function guard(f, out) {
  return () => {
    try {
      f();
    } catch (e) {
      $(out).textContent = "error: " + e;
    }
  };
}

await init();
$("d23").addEventListener("input", () => ($("d23v").textContent = $("d23").value));
$("orun").addEventListener("click", guard(runOpinion, "oout"));
$("prun").addEventListener("click", guard(runPopulation, "pout"));
$("vrun").addEventListener("click", guard(runVariance, "vout"));
guard(runVariance, "vout")();
