import { Api } from "./api.js";
import { createApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const base = params.get("api") ?? "";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app element");

const api = new Api(base, (input, init) => window.fetch(input, init));
const app = createApp(root, api, {
  backdrop: params.get("backdrop"),
  author: params.get("author") ?? "",
});
void app.boot();
