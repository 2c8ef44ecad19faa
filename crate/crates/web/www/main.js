import init, { histogramPlan, Session } from "./pkg/sot_web.js";

const $ = (id) => document.getElementById(id);
const MAX_SIDE = 96;
let session = null;
let images = { content: null, reference: null };

function status(text, error = false) {
  $("status").textContent = text;
  $("status").className = error ? "error" : "";
}

function showValues() {
  for (const out of document.querySelectorAll("output")) {
    out.textContent = $(out.htmlFor.value).value;
  }
}

function gaussian(n, mu, sigma) {
  return Array.from({ length: n }, (_, i) => {
    const x = n === 1 ? 0.5 : i / (n - 1);
    return Math.exp(-((x - mu) ** 2) / (2 * sigma * sigma)) + 1e-3;
  });
}

function drawPlan() {
  const n = Number($("bins").value);
  const a = gaussian(n, Number($("mu-a").value), 0.12);
  const b = gaussian(n, Number($("mu-b").value), 0.08);
  const eta = 10 ** Number($("eta").value);
  let out;
  try {
    out = histogramPlan(new Float64Array(a), new Float64Array(b), eta, $("exact").checked);
  } catch (e) {
    status(String(e), true);
    return;
  }
  const canvas = $("plan");
  const ctx = canvas.getContext("2d");
  const cell = canvas.width / n;
  const peak = Math.max(...out.slice(0, n * n));
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      const t = Math.sqrt(out[i * n + j] / peak);
      ctx.fillStyle = `rgba(20, 60, 160, ${t})`;
      ctx.fillRect(j * cell, i * cell, cell, cell);
    }
  }
  $("plan-cost").textContent = `transport cost ${out[n * n].toExponential(3)}`;
}

function generated(w, h, tint, phase) {
  const data = new Uint8ClampedArray(w * h * 4);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const v = 0.5 + 0.4 * Math.sin(x / 5 + phase) * Math.cos(y / 7 - phase);
      const k = 4 * (y * w + x);
      for (let c = 0; c < 3; c++) data[k + c] = 255 * Math.min(1, v * tint[c]);
      data[k + 3] = 255;
    }
  }
  return new ImageData(data, w, h);
}

function paint(canvasId, imageData) {
  const canvas = $(canvasId);
  canvas.width = imageData.width;
  canvas.height = imageData.height;
  canvas.getContext("2d").putImageData(imageData, 0, 0);
}

async function readScaled(file) {
  const bitmap = await createImageBitmap(file);
  const scale = Math.min(1, MAX_SIDE / Math.max(bitmap.width, bitmap.height));
  const w = Math.max(1, Math.round(bitmap.width * scale));
  const h = Math.max(1, Math.round(bitmap.height * scale));
  const canvas = new OffscreenCanvas(w, h);
  const ctx = canvas.getContext("2d");
  ctx.drawImage(bitmap, 0, 0, w, h);
  return ctx.getImageData(0, 0, w, h);
}

async function loadImage(which) {
  const file = $(`${which}-file`).files[0];
  if (file) images[which] = await readScaled(file);
  paint(which, images[which]);
}

function render() {
  if (!session) return;
  const reverse = $("direction").value === "reverse";
  const rho = $("no-refine").checked ? 0 : 10 ** Number($("rho").value);
  const source = reverse ? images.reference : images.content;
  try {
    const rgba = session.render(reverse, rho, Number($("stride").value));
    paint("output", new ImageData(new Uint8ClampedArray(rgba), source.width, source.height));
    status("Ready.");
  } catch (e) {
    status(String(e), true);
  }
}

function fitSession() {
  status("Fitting…");
  // Let the status paint before the synchronous fit blocks the page.
  setTimeout(() => {
    try {
      if (session) session.free();
      const { content, reference } = images;
      session = new Session(
        new Uint8Array(content.data.buffer), content.width, content.height,
        new Uint8Array(reference.data.buffer), reference.width, reference.height,
        Number($("patch").value), Number($("atoms").value), Number($("samples").value),
        Number($("iters").value), 1,
      );
      const losses = session.losses();
      const last = losses.slice(-5).map((v) => v.toExponential(2));
      $("losses").textContent =
        `${session.iterations()} iterations; final E_sp_x ${last[0]}, E_sp_y ${last[1]}, E_c ${last[4]}`;
      render();
    } catch (e) {
      session = null;
      status(String(e), true);
    }
  }, 20);
}

async function main() {
  await init();
  images.content = generated(80, 64, [0.5, 0.7, 1.2], 0);
  images.reference = generated(72, 72, [1.2, 0.7, 0.4], 1.3);
  paint("content", images.content);
  paint("reference", images.reference);

  for (const id of ["bins", "mu-a", "mu-b", "eta", "exact"]) {
    $(id).addEventListener("input", () => { showValues(); drawPlan(); });
  }
  for (const id of ["direction", "rho", "no-refine", "stride"]) {
    $(id).addEventListener("input", () => { showValues(); render(); });
  }
  $("content-file").addEventListener("change", () => loadImage("content"));
  $("reference-file").addEventListener("change", () => loadImage("reference"));
  $("fit").addEventListener("click", fitSession);

  showValues();
  drawPlan();
  status("Ready. Press Fit to learn the dictionaries.");
}

main().catch((e) => status(String(e), true));
