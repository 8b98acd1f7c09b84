import { StoryApi } from "./api.js";
import { StoryStore } from "./state.js";
import { AppView } from "./ui.js";

async function boot(): Promise<void> {
  const api = new StoryApi("");
  const store = new StoryStore(api);
  const root = document.getElementById("app");
  if (root === null) {
    throw new Error("missing #app container");
  }

  let frameSize = 64;
  let statusLine: string;
  try {
    const [health, card] = await Promise.all([api.health(), api.modelCard()]);
    const config = card.card["config"];
    if (
      typeof config === "object" && config !== null &&
      typeof (config as { image_size?: unknown }).image_size === "number"
    ) {
      frameSize = (config as { image_size: number }).image_size;
    }
    statusLine = `${health.model_id} @ ${health.config_digest}`;
  } catch (err) {
    statusLine = `service not reachable: ${(err as Error).message}`;
  }

  new AppView(root, store, { frameSize, statusLine });
}

void boot();
