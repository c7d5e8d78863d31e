# run.py

import os
from dotenv import load_dotenv
from xray_reid import create_app

# Load environment variables from .env file
load_dotenv()

app = create_app(os.getenv('XRAY_REID_ENV', 'development'))

if __name__ == '__main__':
    app()
